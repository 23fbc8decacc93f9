//! Full forecaster: RevIN, dual pyramid, coarse-to-fine fusion, prediction
//! head and inverse RevIN, plus the ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{coarse_to_fine, FusionConfig, FusionStack};
use crate::numerics::{num_bins, Real, Tensor, Var};
use crate::params::{Linear, Mode, ParamStore, Probe, Session};
use crate::pyramid::{
    build_frequency_pyramid, build_temporal_pyramid, check_levels, make_band_partition, BandOrder,
    DualPyramid,
};
use crate::revin::{revin_denormalize, revin_normalize, Revin};

/// Architecture variants used for ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Variant {
    #[default]
    Full,
    /// Both streams read the temporal pyramid.
    TemporalOnly,
    /// Both streams read the frequency pyramid.
    FrequencyOnly,
    /// Cross-attention replaced by identity; the joint FFN is kept.
    NoCrossFusion,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::TemporalOnly,
        Variant::FrequencyOnly,
        Variant::NoCrossFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TemporalOnly => "temporal_only",
            Variant::FrequencyOnly => "frequency_only",
            Variant::NoCrossFusion => "no_cross_fusion",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the finest fused sequence is reduced before the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "last" => Ok(Pooling::Last),
            other => Err(Error::Config(vec![format!("pooling `{other}` is not mean or last")])),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Last => "last",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub l_in: usize,
    pub l_pred: usize,
    pub channels: usize,
    pub levels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub revin_affine: bool,
    pub revin_eps: f64,
    pub band_order: BandOrder,
    pub pooling: Pooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            l_in: 96,
            l_pred: 96,
            channels: 7,
            levels: 4,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            dropout: 0.1,
            variant: Variant::Full,
            revin_affine: true,
            revin_eps: crate::revin::DEFAULT_EPS,
            band_order: BandOrder::LowFirst,
            pooling: Pooling::Mean,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(Error::Config(e)) = check_levels(self.l_in, self.levels) {
            errs.extend(e);
        }
        if self.l_in < 2 {
            errs.push(format!("model.L_in = {} must be at least 2", self.l_in));
        } else if self.levels >= 2 && num_bins(self.l_in) < self.levels {
            errs.push(format!(
                "model.L_in = {} has {} frequency bins, fewer than model.S = {}",
                self.l_in,
                num_bins(self.l_in),
                self.levels
            ));
        }
        if self.l_pred < 1 {
            errs.push("model.L_pred must be at least 1".into());
        }
        if self.channels < 1 {
            errs.push("model.C must be at least 1".into());
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            errs.push(format!(
                "model.d_model = {} must be divisible by model.heads = {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 {
            errs.push("model.d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("model.dropout = {} must lie in [0, 1)", self.dropout));
        }
        if self.revin_eps <= 0.0 {
            errs.push("model.revin_eps must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Stable `key=value` lines, sorted by key.
    pub fn to_canonical(&self) -> String {
        let mut pairs = vec![
            ("model.C", self.channels.to_string()),
            ("model.L_in", self.l_in.to_string()),
            ("model.L_pred", self.l_pred.to_string()),
            ("model.S", self.levels.to_string()),
            ("model.band_order", self.band_order.to_string()),
            ("model.d_ff", self.d_ff.to_string()),
            ("model.d_model", self.d_model.to_string()),
            ("model.dropout", format!("{:?}", self.dropout)),
            ("model.heads", self.heads.to_string()),
            ("model.pooling", self.pooling.to_string()),
            ("model.revin_affine", self.revin_affine.to_string()),
            ("model.revin_eps", format!("{:?}", self.revin_eps)),
            ("model.variant", self.variant.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut errs = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("malformed line `{line}`"));
                continue;
            };
            if let Err(e) = cfg.set(k.trim(), v.trim()) {
                errs.push(e);
            }
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Assigns one `model.*` key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn parse<V: FromStr>(key: &str, value: &str) -> std::result::Result<V, String> {
            value
                .parse()
                .map_err(|_| format!("{key}: cannot parse `{value}`"))
        }
        match key {
            "model.L_in" => self.l_in = parse(key, value)?,
            "model.L_pred" => self.l_pred = parse(key, value)?,
            "model.C" => self.channels = parse(key, value)?,
            "model.S" => self.levels = parse(key, value)?,
            "model.d_model" => self.d_model = parse(key, value)?,
            "model.heads" => self.heads = parse(key, value)?,
            "model.d_ff" => self.d_ff = parse(key, value)?,
            "model.dropout" => self.dropout = parse(key, value)?,
            "model.variant" => self.variant = value.parse().map_err(|e: Error| format!("{key}: {e}"))?,
            "model.revin_affine" => self.revin_affine = parse(key, value)?,
            "model.revin_eps" => self.revin_eps = parse(key, value)?,
            "model.band_order" => {
                self.band_order = value.parse().map_err(|e: Error| format!("{key}: {e}"))?
            }
            "model.pooling" => self.pooling = value.parse().map_err(|e: Error| format!("{key}: {e}"))?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Hex digest of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn fusion(&self) -> FusionConfig {
        FusionConfig {
            seq_len: self.l_in,
            levels: self.levels,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            cross_attention: self.variant != Variant::NoCrossFusion,
        }
    }
}

/// Forecast in original units plus the raw head output.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast<T> {
    /// `(B, L_pred, C)`
    pub values: Tensor<T>,
    /// `(B, L_pred, C)` before inverse RevIN.
    pub normalized: Tensor<T>,
}

/// Graph outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub values: Var,
    pub normalized: Var,
}

/// Parameter layout of a forecaster; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub revin: Revin,
    pub fusion: FusionStack,
    pub head: Linear,
}

impl Model {
    /// Allocates and initializes all parameters from `seed`.
    pub fn new<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let revin = Revin::new(&mut store, config.channels, config.revin_affine, config.revin_eps);
        let fusion = FusionStack::new(&mut store, config.fusion(), &mut rng)?;
        let head = Linear::new(&mut store, "head", config.d_model, config.l_pred, &mut rng);
        Ok((
            Self {
                config: config.clone(),
                revin,
                fusion,
                head,
            },
            store,
        ))
    }

    /// Closed-form parameter count for a configuration.
    pub fn expected_param_count(config: &ModelConfig) -> usize {
        let d = config.d_model;
        let revin = if config.revin_affine { 2 * config.channels } else { 0 };
        let per_scale = |s: usize| {
            let len = config.l_in >> s;
            let embed = 2 * (2 * d + len * d);
            let attention = if config.variant == Variant::NoCrossFusion {
                0
            } else {
                2 * 4 * (d * d + d)
            };
            let norms = 2 * 2 * d + 2 * 2 * d;
            let ffn = (2 * d * config.d_ff + config.d_ff) + (config.d_ff * 2 * d + 2 * d);
            embed + attention + norms + ffn
        };
        revin + (0..config.levels).map(per_scale).sum::<usize>() + d * config.l_pred + config.l_pred
    }

    /// Pyramid levels as `(temporal-stream input, frequency-stream input)`
    /// pairs, wired according to the variant.
    pub fn stream_inputs(&self, pyramid: &DualPyramid) -> Vec<(Var, Var)> {
        let pairs = pyramid.temporal.iter().zip(&pyramid.frequency);
        match self.config.variant {
            Variant::Full | Variant::NoCrossFusion => pairs.map(|(&t, &f)| (t, f)).collect(),
            Variant::TemporalOnly => pyramid.temporal.iter().map(|&t| (t, t)).collect(),
            Variant::FrequencyOnly => pyramid.frequency.iter().map(|&f| (f, f)).collect(),
        }
    }

    /// Builds the pyramids this variant actually reads. The temporal-only
    /// variant leaves `frequency` equal to `temporal`.
    pub fn build_pyramid<T: Real>(&self, sess: &mut Session<'_, T>, x_norm: Var) -> Result<DualPyramid> {
        let cfg = &self.config;
        let temporal = build_temporal_pyramid(&mut sess.tape, x_norm, cfg.levels)?;
        let frequency = if cfg.variant == Variant::TemporalOnly {
            temporal.clone()
        } else {
            let partition = make_band_partition(num_bins(cfg.l_in), cfg.levels)?;
            build_frequency_pyramid(&mut sess.tape, x_norm, &partition, cfg.band_order)?
        };
        Ok(DualPyramid {
            temporal,
            frequency,
        })
    }

    /// Fusion and prediction head on an already built pyramid; returns the
    /// normalized forecast `(B, L_pred, C)`.
    pub fn predict_normalized<T: Real>(&self, sess: &mut Session<'_, T>, pyramid: &DualPyramid) -> Result<Var> {
        let cfg = &self.config;
        let shape = sess.tape.shape(pyramid.temporal[0]).to_vec();
        let (b, c) = (shape[0], shape[2]);
        let levels = self.stream_inputs(pyramid);
        let finest = coarse_to_fine(sess, &levels, &self.fusion)?;
        let pooled = match cfg.pooling {
            Pooling::Mean => sess.tape.mean_axis(finest, 1)?,
            Pooling::Last => {
                let last = sess.tape.narrow(finest, 1, cfg.l_in - 1, 1)?;
                sess.tape.reshape(last, vec![b * c, cfg.d_model])?
            }
        };
        let out = self.head.forward(sess, pooled)?;
        let out = sess.tape.reshape(out, vec![b, c, cfg.l_pred])?;
        sess.tape.permute(out, &[0, 2, 1])
    }

    /// Forward pass on a tape. `x` must be `(B, L_in, C)`.
    pub fn forward_vars<T: Real>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<ForwardVars> {
        let cfg = &self.config;
        let shape = sess.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != cfg.l_in || shape[2] != cfg.channels {
            return Err(Error::dims("forward", &shape, &[0, cfg.l_in, cfg.channels]));
        }
        if !sess.tape.value(x).is_finite() {
            return Err(Error::NonFinite("forward input".into()));
        }
        let (x_norm, state) = revin_normalize(sess, x, &self.revin)?;
        let pyramid = self.build_pyramid(sess, x_norm)?;
        let normalized = self.predict_normalized(sess, &pyramid)?;
        let values = revin_denormalize(sess, normalized, &state, &self.revin)?;
        if !sess.tape.value(values).is_finite() {
            return Err(Error::NonFinite("forecast".into()));
        }
        Ok(ForwardVars { values, normalized })
    }

    /// Inference without gradients or dropout.
    pub fn forward<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Forecast<T>> {
        let mut sess = Session::inference(params);
        let xv = sess.tape.constant(x.clone());
        let out = self.forward_vars(&mut sess, xv)?;
        Ok(Forecast {
            values: sess.tape.value(out.values).clone(),
            normalized: sess.tape.value(out.normalized).clone(),
        })
    }

    /// Inference that also captures attention weights and fused activations.
    pub fn forward_probed<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<(Forecast<T>, Probe<T>)> {
        let mut sess = Session::new(params, Mode::Eval).with_probe();
        let xv = sess.tape.constant(x.clone());
        let out = self.forward_vars(&mut sess, xv)?;
        let forecast = Forecast {
            values: sess.tape.value(out.values).clone(),
            normalized: sess.tape.value(out.normalized).clone(),
        };
        Ok((forecast, sess.take_probe().unwrap_or_default()))
    }
}

/// Builds the model for a config, the shared entry point for all variants.
pub fn make_variant<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
    Model::new(config, seed)
}
