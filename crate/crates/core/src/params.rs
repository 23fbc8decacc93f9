//! Named parameter storage and the per-forward [`Session`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dims("param_set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Whether a forward pass samples dropout masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

/// Attention weights of one cross-attention call, kept for inspection.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    pub scale: usize,
    /// `"temporal"` for temporal queries over frequency keys, `"frequency"` for the reverse.
    pub query_stream: &'static str,
    /// `(B*C, H, L_q, L_k)`
    pub weights: Tensor<T>,
}

/// Debug capture of intermediate activations.
#[derive(Clone, Debug, Default)]
pub struct Probe<T> {
    pub attention: Vec<AttentionRecord<T>>,
    /// Fused `(temporal, frequency)` block outputs, keyed by scale.
    pub fused: Vec<(usize, Tensor<T>, Tensor<T>)>,
}

/// One forward pass: a fresh tape bound to a parameter store.
pub struct Session<'p, T: Real> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
    rng: Option<ChaCha8Rng>,
    probe: Option<Probe<T>>,
}

impl<'p, T: Real> Session<'p, T> {
    /// Session whose parameters receive gradients.
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable: true,
            rng: match mode {
                Mode::Eval => None,
                Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            },
            probe: None,
        }
    }

    /// Evaluation session: no dropout, parameters enter as constants.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        let mut s = Self::new(params, Mode::Eval);
        s.trainable = false;
        s
    }

    pub fn with_probe(mut self) -> Self {
        self.probe = Some(Probe::default());
        self
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Tape node for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = T::from_f64_lossy(1.0 / keep);
        let n = self.tape.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        self.tape.dropout_with_mask(x, mask)
    }

    pub fn probe_mut(&mut self) -> Option<&mut Probe<T>> {
        self.probe.as_mut()
    }

    pub fn take_probe(&mut self) -> Option<Probe<T>> {
        self.probe.take()
    }

    /// Gradient for every parameter in store order; `None` where the forward
    /// pass never touched the parameter.
    pub fn param_grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(<[T]>::to_vec)))
            .collect()
    }
}

/// Affine map on the last axis: `x W + b`, `W` shaped `(in, out)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform fan-in initialization, bound `1/sqrt(in_dim)`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::uniform(vec![in_dim, out_dim], bound, rng),
        );
        let bias = store.add(
            format!("{prefix}.bias"),
            Tensor::uniform(vec![out_dim], bound, rng),
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = sess.param(self.weight);
        let b = sess.param(self.bias);
        let y = sess.tape.matmul(x, w)?;
        sess.tape.add(y, b)
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Gain and bias of a layer norm over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(vec![dim])),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = sess.param(self.gain);
        let b = sess.param(self.bias);
        sess.tape.layer_norm(x, g, b, self.eps)
    }
}
