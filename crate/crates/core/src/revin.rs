//! Reversible instance normalization.
//!
//! Each (instance, channel) series of the look-back window is standardized
//! with its own mean and standard deviation, then passed through a per-channel
//! affine map. The statistics are kept in a [`RevinState`] so the forecast can
//! be mapped back to the original units. Statistics are treated as constants
//! by the tape; gradients reach only the affine gain and bias.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{ParamId, ParamStore, Session};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Affine parameters of the normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct Revin {
    pub channels: usize,
    pub eps: f64,
    /// `None` when the affine map is disabled.
    pub affine: Option<(ParamId, ParamId)>,
}

impl Revin {
    pub fn new<T: Real>(store: &mut ParamStore<T>, channels: usize, affine: bool, eps: f64) -> Self {
        let affine = affine.then(|| {
            (
                store.add("revin.gain", Tensor::ones(vec![channels])),
                store.add("revin.bias", Tensor::zeros(vec![channels])),
            )
        });
        Self {
            channels,
            eps,
            affine,
        }
    }

    pub fn num_scalars(&self) -> usize {
        if self.affine.is_some() {
            2 * self.channels
        } else {
            0
        }
    }
}

/// Per-(instance, channel) statistics of one input batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RevinState<T> {
    /// `(B, 1, C)`
    pub mean: Tensor<T>,
    /// `(B, 1, C)`, equal to `sqrt(var + eps)`
    pub std: Tensor<T>,
    pub eps: f64,
}

/// Computes the statistics of a `(B, L, C)` window.
pub fn instance_stats<T: Real>(x: &Tensor<T>, eps: f64) -> Result<RevinState<T>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::precondition(
            "revin_normalize",
            format!("expected (B, L, C) input, got {shape:?}"),
        ));
    }
    let (b, l, c) = (shape[0], shape[1], shape[2]);
    if l < 2 {
        return Err(Error::precondition(
            "revin_normalize",
            format!("window length {l} is below 2"),
        ));
    }
    let d = x.data();
    let mut mean = vec![T::zero(); b * c];
    let mut std = vec![T::zero(); b * c];
    for bi in 0..b {
        for ci in 0..c {
            let mut m = 0.0;
            for t in 0..l {
                m += d[(bi * l + t) * c + ci].to_f64_lossy();
            }
            m /= l as f64;
            let mut v = 0.0;
            for t in 0..l {
                let e = d[(bi * l + t) * c + ci].to_f64_lossy() - m;
                v += e * e;
            }
            v /= l as f64;
            mean[bi * c + ci] = T::from_f64_lossy(m);
            std[bi * c + ci] = T::from_f64_lossy((v + eps).sqrt());
        }
    }
    Ok(RevinState {
        mean: Tensor::new(vec![b, 1, c], mean)?,
        std: Tensor::new(vec![b, 1, c], std)?,
        eps,
    })
}

/// `x_norm = gain * (x - mean) / std + bias`, per instance and channel.
pub fn revin_normalize<T: Real>(
    sess: &mut Session<'_, T>,
    x: Var,
    layer: &Revin,
) -> Result<(Var, RevinState<T>)> {
    let state = instance_stats(sess.tape.value(x), layer.eps)?;
    let c = sess.tape.shape(x)[2];
    if c != layer.channels {
        return Err(Error::dims("revin_normalize", sess.tape.shape(x), &[layer.channels]));
    }
    let mean = sess.tape.constant(state.mean.clone());
    let std = sess.tape.constant(state.std.clone());
    let centered = sess.tape.sub(x, mean)?;
    let mut out = sess.tape.div(centered, std)?;
    if let Some((gain, bias)) = layer.affine {
        let g = sess.param(gain);
        let b = sess.param(bias);
        out = sess.tape.mul(out, g)?;
        out = sess.tape.add(out, b)?;
    }
    Ok((out, state))
}

/// Exact inverse of [`revin_normalize`]: `y = (y_norm - bias) / gain * std + mean`.
pub fn revin_denormalize<T: Real>(
    sess: &mut Session<'_, T>,
    y_norm: Var,
    state: &RevinState<T>,
    layer: &Revin,
) -> Result<Var> {
    let mut y = y_norm;
    if let Some((gain, bias)) = layer.affine {
        if let Some(ch) = sess
            .params()
            .get(gain)
            .data()
            .iter()
            .position(|&g| g == T::zero())
        {
            return Err(Error::SingularAffine { channel: ch });
        }
        let g = sess.param(gain);
        let b = sess.param(bias);
        y = sess.tape.sub(y, b)?;
        y = sess.tape.div(y, g)?;
    }
    let std = sess.tape.constant(state.std.clone());
    let mean = sess.tape.constant(state.mean.clone());
    y = sess.tape.mul(y, std)?;
    sess.tape.add(y, mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(affine: bool, c: usize) -> (ParamStore<f64>, Revin) {
        let mut store = ParamStore::new();
        let layer = Revin::new(&mut store, c, affine, DEFAULT_EPS);
        (store, layer)
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let (store, layer) = setup(true, 2);
        let mut sess = Session::new(&store, Mode::Eval);
        let x = sess.tape.constant(Tensor::full(vec![1, 5, 2], 7.0));
        let (y, state) = revin_normalize(&mut sess, x, &layer).unwrap();
        assert!(sess.tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!(state.std.data().iter().all(|&s| s >= DEFAULT_EPS.sqrt()));
    }

    #[test]
    fn symmetric_pair_maps_to_unit() {
        let mut store = ParamStore::<f64>::new();
        let layer = Revin::new(&mut store, 1, true, 1e-14);
        let mut sess = Session::new(&store, Mode::Eval);
        let x = sess.tape.constant(Tensor::from_f64(vec![1, 2, 1], &[0.0, 2.0]).unwrap());
        let (y, _) = revin_normalize(&mut sess, x, &layer).unwrap();
        let d = sess.tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn moments_follow_gain_and_bias() {
        let (mut store, layer) = setup(true, 3);
        let (g, b) = layer.affine.unwrap();
        store.set(g, Tensor::from_f64(vec![3], &[0.5, 2.0, 1.5]).unwrap()).unwrap();
        store.set(b, Tensor::from_f64(vec![3], &[1.0, -3.0, 0.0]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Tensor::randn(vec![2, 50, 3], 4.0, &mut rng);
        let mut sess = Session::new(&store, Mode::Eval);
        let x = sess.tape.constant(data);
        let (y, _) = revin_normalize(&mut sess, x, &layer).unwrap();
        let out = sess.tape.value(y);
        for bi in 0..2 {
            for (ci, (gain, bias)) in [(0.5, 1.0), (2.0, -3.0), (1.5, 0.0)].into_iter().enumerate() {
                let col: Vec<f64> = (0..50).map(|t| out.at(&[bi, t, ci])).collect();
                let m = col.iter().sum::<f64>() / 50.0;
                let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 50.0).sqrt();
                assert!((m - bias).abs() < 1e-9);
                assert!((s - gain).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn denormalize_inverts_and_rejects_zero_gain() {
        let (mut store, layer) = setup(true, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = Tensor::randn(vec![3, 16, 2], 2.0, &mut rng);
        {
            let mut sess = Session::new(&store, Mode::Eval);
            let x = sess.tape.constant(data.clone());
            let (y, state) = revin_normalize(&mut sess, x, &layer).unwrap();
            let back = revin_denormalize(&mut sess, y, &state, &layer).unwrap();
            assert!(sess.tape.value(back).max_abs_diff(&data) < 1e-12);
        }
        let (g, _) = layer.affine.unwrap();
        store.set(g, Tensor::from_f64(vec![2], &[1.0, 0.0]).unwrap()).unwrap();
        let mut sess = Session::new(&store, Mode::Eval);
        let x = sess.tape.constant(data);
        let (y, state) = revin_normalize(&mut sess, x, &layer).unwrap();
        let err = revin_denormalize(&mut sess, y, &state, &layer).unwrap_err();
        assert!(matches!(err, Error::SingularAffine { channel: 1 }));
    }

    #[test]
    fn bias_valued_forecast_maps_to_input_mean() {
        let (mut store, layer) = setup(true, 2);
        let (_, b) = layer.affine.unwrap();
        store.set(b, Tensor::from_f64(vec![2], &[0.3, -0.7]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Tensor::randn(vec![1, 10, 2], 1.0, &mut rng);
        let mut sess = Session::new(&store, Mode::Eval);
        let x = sess.tape.constant(data);
        let (_, state) = revin_normalize(&mut sess, x, &layer).unwrap();
        let fc = sess
            .tape
            .constant(Tensor::from_f64(vec![1, 4, 2], &[0.3, -0.7, 0.3, -0.7, 0.3, -0.7, 0.3, -0.7]).unwrap());
        let y = revin_denormalize(&mut sess, fc, &state, &layer).unwrap();
        for t in 0..4 {
            for c in 0..2 {
                let expect = state.mean.at(&[0, 0, c]);
                assert!((sess.tape.value(y).at(&[0, t, c]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_affine_on_standard_input_is_unchanged() {
        let (store, layer) = setup(true, 1);
        // mean 0, population std 1
        let data = Tensor::from_f64(vec![1, 4, 1], &[1.0, -1.0, 1.0, -1.0]).unwrap();
        let mut sess = Session::new(&store, Mode::Eval);
        let x = sess.tape.constant(data.clone());
        let (y, _) = revin_normalize(&mut sess, x, &layer).unwrap();
        assert!(sess.tape.value(y).max_abs_diff(&data) < 1e-5);
    }

    #[test]
    fn disabled_affine_has_no_parameters() {
        let (store, layer) = setup(false, 4);
        assert!(store.is_empty());
        assert_eq!(layer.num_scalars(), 0);
    }
}
