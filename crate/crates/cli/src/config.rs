//! Flat `key = value` run configuration with dotted sections.
//!
//! Values are layered: registry defaults, then the config file, then
//! `--set` overrides. Every key is known up front so typos fail loudly and
//! `--help` can list the full surface.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dpanet::data::{Split, SplitPolicy};
use dpanet::{ModelConfig, TrainConfig};

use crate::CliError;

/// Directory searched for `<data.name>.csv` when `data.path` is empty.
pub const DATA_DIR_ENV: &str = "DPANET_DATA_DIR";

/// File name of the resolved configuration written with every run.
pub const RESOLVED_NAME: &str = "config.resolved";

pub struct KeySpec {
    pub key: String,
    pub default: String,
    pub help: &'static str,
}

fn model_help(key: &str) -> &'static str {
    match key {
        "model.C" => "number of input channels",
        "model.L_in" => "look-back window length",
        "model.L_pred" => "forecast horizon",
        "model.S" => "pyramid levels; L_in must be divisible by 2^(S-1)",
        "model.band_order" => "frequency band pairing: low_first or high_first",
        "model.d_ff" => "hidden width of the fusion feed-forward network",
        "model.d_model" => "embedding width",
        "model.dropout" => "dropout rate on attention weights and feed-forward",
        "model.heads" => "attention heads; must divide d_model",
        "model.pooling" => "sequence pooling before the head: mean or last",
        "model.revin_affine" => "learnable RevIN gain and bias",
        "model.revin_eps" => "RevIN variance floor",
        "model.variant" => "full, temporal_only, frequency_only or no_cross_fusion",
        _ => "",
    }
}

/// Every accepted key with its default, in display order.
pub fn registry() -> Vec<KeySpec> {
    let t = TrainConfig::default();
    let mut keys = vec![
        spec("seed", "2024", "source of all randomness: init, shuffling, dropout, synthetic noise"),
        spec("output.dir", "runs", "directory for checkpoints, records and the resolved config"),
        spec("checkpoint.path", "", "checkpoint file; empty means <output.dir>/model.ckpt"),
        spec("data.path", "", "dataset CSV; empty means $DPANET_DATA_DIR/<data.name>.csv"),
        spec("data.name", "ETTh1", "dataset name used when data.path is empty"),
        spec("data.policy", "ett_hourly", "split policy: ett_hourly, ett_minutely or ratio_702010"),
    ];
    for line in ModelConfig::default().to_canonical().lines() {
        let (k, v) = line.split_once('=').expect("canonical lines are key=value");
        keys.push(KeySpec {
            key: k.to_string(),
            default: v.to_string(),
            help: model_help(k),
        });
    }
    keys.extend([
        spec("train.lr", &fmt_f64(t.lr), "Adam learning rate"),
        spec("train.beta1", &fmt_f64(t.beta1), "Adam first-moment decay"),
        spec("train.beta2", &fmt_f64(t.beta2), "Adam second-moment decay"),
        spec("train.eps", &fmt_f64(t.eps), "Adam denominator floor"),
        spec("train.batch_size", &t.batch_size.to_string(), "windows per optimizer step"),
        spec("train.max_epochs", &t.max_epochs.to_string(), "upper bound on epochs"),
        spec("train.patience", &t.patience.to_string(), "epochs without validation improvement before stopping"),
        spec("train.grad_clip_norm", &fmt_f64(t.grad_clip_norm), "global gradient norm cap"),
        spec("train.max_steps", "0", "optimizer step cap across epochs; 0 disables it"),
        spec("eval.split", "test", "split scored by eval: train, val or test"),
        spec("eval.batch_size", "256", "windows per evaluation batch"),
        spec("forecast.input", "", "CSV whose last L_in rows are forecast"),
        spec("forecast.output", "", "forecast CSV; empty means <output.dir>/forecast.csv"),
        spec("ablate.horizons", "96", "comma-separated horizons trained for each variant"),
        spec("synth.rows", "2000", "rows of the synthetic series"),
        spec("synth.channels", "2", "channels of the synthetic series"),
        spec("synth.periods", "24,96", "comma-separated sine periods"),
        spec("synth.amplitudes", "1,1", "comma-separated amplitudes, one per period"),
        spec("synth.noise", "0", "standard deviation of Gaussian noise"),
        spec("synth.output", "", "synthetic CSV; empty means <output.dir>/synth.csv"),
    ]);
    keys
}

fn spec(key: &str, default: &str, help: &'static str) -> KeySpec {
    KeySpec {
        key: key.to_string(),
        default: default.to_string(),
        help,
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// The key listing appended to `--help`.
pub fn help_listing() -> String {
    let keys = registry();
    let width = keys.iter().map(|k| k.key.len() + k.default.len() + 3).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (set in --config files or with --set key=value):\n");
    for k in &keys {
        let lhs = format!("{} = {}", k.key, k.default);
        let _ = writeln!(out, "  {lhs:<width$}  {}", k.help);
    }
    let _ = write!(out, "\nEnvironment:\n  {DATA_DIR_ENV}  default dataset directory (falls back to ./data)");
    out
}

/// Raw textual values for every registered key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: registry().into_iter().map(|k| (k.key, k.default)).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`. All unknown keys and
    /// malformed lines are reported together.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut errs = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                match line.split_once('=') {
                    Some((k, v)) => cfg.assign(k.trim(), v.trim(), &mut errs),
                    None => errs.push(format!("{}:{}: expected `key = value`, got `{line}`", path.display(), n + 1)),
                }
            }
        }
        for item in overrides {
            match item.split_once('=') {
                Some((k, v)) => cfg.assign(k.trim(), v.trim(), &mut errs),
                None => errs.push(format!("--set `{item}`: expected key=value")),
            }
        }
        if errs.is_empty() {
            return Ok(cfg);
        }
        // report bad values of known keys alongside the unknown ones
        if let Err(CliError::Validation(more)) = cfg.resolve() {
            errs.extend(more);
        }
        Err(CliError::Validation(errs))
    }

    fn assign(&mut self, key: &str, value: &str, errs: &mut Vec<String>) {
        match self.values.get_mut(key) {
            Some(slot) => *slot = value.to_string(),
            None => errs.push(format!("unknown key `{key}`")),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        assert!(self.values.contains_key(key), "unregistered key {key}");
        self.values.insert(key.to_string(), value.into());
    }

    /// One `key = value` line per key in registry order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in registry() {
            let _ = writeln!(out, "{} = {}", k.key, self.get(&k.key));
        }
        out
    }

    /// Parses and validates every key, collecting all problems.
    pub fn resolve(&self) -> Result<Settings, CliError> {
        let mut errs = Vec::new();
        let mut model = ModelConfig::default();
        for k in registry().iter().filter(|k| k.key.starts_with("model.")) {
            if let Err(e) = model.set(&k.key, self.get(&k.key)) {
                errs.push(e);
            }
        }
        let mut p = Parser { cfg: self, errs: &mut errs };
        let seed: u64 = p.parse("seed");
        let output_dir = PathBuf::from(self.get("output.dir"));
        let checkpoint = match self.get("checkpoint.path") {
            "" => output_dir.join("model.ckpt"),
            s => PathBuf::from(s),
        };
        let policy: SplitPolicy = p.parse_with("data.policy", |s| s.parse().map_err(|e: dpanet::Error| e.to_string()));
        let max_steps: usize = p.parse("train.max_steps");
        let train = TrainConfig {
            lr: p.parse("train.lr"),
            beta1: p.parse("train.beta1"),
            beta2: p.parse("train.beta2"),
            eps: p.parse("train.eps"),
            batch_size: p.parse("train.batch_size"),
            max_epochs: p.parse("train.max_epochs"),
            patience: p.parse("train.patience"),
            grad_clip_norm: p.parse("train.grad_clip_norm"),
            seed,
            max_steps: (max_steps > 0).then_some(max_steps),
        };
        let eval_split: Split = p.parse_with("eval.split", |s| s.parse().map_err(|e: dpanet::Error| e.to_string()));
        let eval_batch: usize = p.parse("eval.batch_size");
        let horizons: Vec<usize> = p.list("ablate.horizons");
        let synth = SynthSettings {
            rows: p.parse("synth.rows"),
            channels: p.parse("synth.channels"),
            periods: p.list("synth.periods"),
            amplitudes: p.list("synth.amplitudes"),
            noise: p.parse("synth.noise"),
            output: optional_path(self.get("synth.output")).unwrap_or_else(|| output_dir.join("synth.csv")),
        };

        if let Err(dpanet::Error::Config(e)) = model.validate() {
            errs.extend(e);
        }
        // range checks are skipped when a train key failed to parse
        if !errs.iter().any(|e| e.starts_with("train.")) {
            if let Err(dpanet::Error::Config(e)) = train.validate() {
                errs.extend(e);
            }
        }
        if eval_batch == 0 {
            errs.push("eval.batch_size must be positive".into());
        }
        if horizons.is_empty() || horizons.contains(&0) {
            errs.push("ablate.horizons must list positive horizons".into());
        }
        if synth.periods.len() != synth.amplitudes.len() {
            errs.push(format!(
                "synth.periods has {} entries but synth.amplitudes has {}",
                synth.periods.len(),
                synth.amplitudes.len()
            ));
        }
        if !errs.is_empty() {
            return Err(CliError::Validation(errs));
        }
        Ok(Settings {
            seed,
            output_dir,
            checkpoint,
            data_path: optional_path(self.get("data.path")),
            data_name: self.get("data.name").to_string(),
            policy,
            model,
            train,
            eval_split,
            eval_batch,
            forecast_input: optional_path(self.get("forecast.input")),
            forecast_output: optional_path(self.get("forecast.output")),
            horizons,
            synth,
        })
    }
}

fn optional_path(s: &str) -> Option<PathBuf> {
    (!s.is_empty()).then(|| PathBuf::from(s))
}

struct Parser<'a> {
    cfg: &'a RunConfig,
    errs: &'a mut Vec<String>,
}

impl Parser<'_> {
    fn parse<V: FromStr + Default>(&mut self, key: &str) -> V {
        self.parse_with(key, |s| s.parse().map_err(|_| format!("cannot parse `{s}`")))
    }

    fn parse_with<V: Default>(&mut self, key: &str, f: impl FnOnce(&str) -> Result<V, String>) -> V {
        f(self.cfg.get(key)).unwrap_or_else(|e| {
            self.errs.push(format!("{key}: {e}"));
            V::default()
        })
    }

    fn list<V: FromStr>(&mut self, key: &str) -> Vec<V> {
        let raw = self.cfg.get(key);
        let mut out = Vec::new();
        for item in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.parse() {
                Ok(v) => out.push(v),
                Err(_) => self.errs.push(format!("{key}: cannot parse `{item}` in `{raw}`")),
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SynthSettings {
    pub rows: usize,
    pub channels: usize,
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub noise: f64,
    pub output: PathBuf,
}

/// Typed view of a validated [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub data_path: Option<PathBuf>,
    pub data_name: String,
    pub policy: SplitPolicy,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_split: Split,
    pub eval_batch: usize,
    pub forecast_input: Option<PathBuf>,
    pub forecast_output: Option<PathBuf>,
    pub horizons: Vec<usize>,
    pub synth: SynthSettings,
}

impl Settings {
    /// Explicit `data.path`, else `<data dir>/<data.name>.csv`.
    pub fn dataset_path(&self) -> PathBuf {
        match &self.data_path {
            Some(p) => p.clone(),
            None => data_dir().join(format!("{}.csv", self.data_name)),
        }
    }
}

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}
