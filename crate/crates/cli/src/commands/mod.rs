mod ablate;
mod forecast;
mod tools;
mod train;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use dpanet::data::{load_csv, Scaler};
use dpanet::RawDataset;

use crate::config::{RunConfig, Settings, RESOLVED_NAME};
use crate::{CliError, Command, RunArgs};

pub use ablate::{paper_reference, AblationRow};

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(args) => train::run_train(load(&args)?),
        Command::Eval(args) => train::run_eval(load(&args)?),
        Command::Forecast(args) => forecast::run_forecast(load(&args)?),
        Command::Ablate(args) => ablate::run_ablate(load(&args)?),
        Command::Gradcheck { run, only, inject_fault } => tools::run_gradcheck(load(&run)?, &only, inject_fault),
        Command::Synth(args) => tools::run_synth(load(&args)?),
    }
}

fn load(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut overrides = args.overrides.clone();
    if let Some(dir) = &args.out {
        overrides.push(format!("output.dir={}", dir.display()));
    }
    RunConfig::load(args.config.as_deref(), &overrides)
}

/// Creates the output directory and writes the resolved config into it.
fn prepare_output(cfg: &RunConfig, settings: &Settings) -> Result<(), CliError> {
    let dir = &settings.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(RESOLVED_NAME);
    std::fs::write(&path, cfg.to_text()).map_err(|e| CliError::io(&path, e))
}

/// Appends JSON lines, creating the file if needed.
fn append_lines(path: &Path, lines: &[String]) -> Result<(), CliError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    for line in lines {
        writeln!(f, "{line}").map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

fn create_file(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(|e| CliError::io(path, e))
}

/// Loads the configured dataset and pins its resolved path into `cfg`.
fn load_dataset(cfg: &mut RunConfig, settings: &Settings) -> Result<RawDataset, CliError> {
    let path = settings.dataset_path();
    cfg.set("data.path", path.display().to_string());
    let raw = load_csv(&path)?;
    if raw.num_channels() != settings.model.channels {
        return Err(CliError::invalid(format!(
            "model.C = {} but {} has {} channels",
            settings.model.channels,
            path.display(),
            raw.num_channels()
        )));
    }
    Ok(raw)
}

/// Sidecar file holding the train-split standardization of a checkpoint.
pub fn scaler_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("scaler.json")
}

fn save_scaler(checkpoint: &Path, scaler: &Scaler) -> Result<(), CliError> {
    let path = scaler_path(checkpoint);
    let body = serde_json::json!({ "mean": scaler.mean, "std": scaler.std });
    std::fs::write(&path, format!("{body}\n")).map_err(|e| CliError::io(&path, e))
}

pub fn load_scaler(checkpoint: &Path) -> Result<Option<Scaler>, CliError> {
    let path = scaler_path(checkpoint);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(CliError::io(&path, e)),
    };
    let bad = |what: &str| CliError::invalid(format!("{}: {what}", path.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e.to_string()))?;
    let column = |key: &str| -> Result<Vec<f64>, CliError> {
        value[key]
            .as_array()
            .ok_or_else(|| bad(&format!("missing `{key}` array")))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| bad(&format!("non-numeric entry in `{key}`"))))
            .collect()
    };
    let (mean, std) = (column("mean")?, column("std")?);
    if mean.len() != std.len() {
        return Err(bad("`mean` and `std` differ in length"));
    }
    Ok(Some(Scaler { mean, std }))
}
