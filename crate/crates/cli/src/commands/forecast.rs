use dpanet::checkpoint::load_checkpoint;
use dpanet::data::{load_csv, write_csv};
use dpanet::numerics::Tensor;
use dpanet::RawDataset;

use super::{load_scaler, prepare_output, scaler_path};
use crate::config::RunConfig;
use crate::CliError;

pub fn run_forecast(cfg: RunConfig) -> Result<(), CliError> {
    let settings = cfg.resolve()?;
    let m = &settings.model;
    let input = settings
        .forecast_input
        .clone()
        .ok_or_else(|| CliError::invalid("forecast.input is required"))?;
    let raw = load_csv(&input)?;
    let mut errs = Vec::new();
    if raw.rows() < m.l_in {
        errs.push(format!(
            "{} has {} rows, fewer than model.L_in = {}",
            input.display(),
            raw.rows(),
            m.l_in
        ));
    }
    if raw.num_channels() != m.channels {
        errs.push(format!(
            "model.C = {} but {} has {} channels",
            m.channels,
            input.display(),
            raw.num_channels()
        ));
    }
    if !errs.is_empty() {
        return Err(CliError::Validation(errs));
    }
    let step = raw
        .median_step()
        .ok_or_else(|| CliError::invalid(format!("{} needs two rows to infer a time step", input.display())))?;

    let (model, store) = load_checkpoint::<f32>(&settings.checkpoint, m)?;
    let scaler = load_scaler(&settings.checkpoint)?;
    if scaler.is_none() {
        eprintln!(
            "warning: {} not found; forecasting in the input's own units",
            scaler_path(&settings.checkpoint).display()
        );
    }
    if let Some(s) = &scaler {
        if s.mean.len() != m.channels {
            return Err(CliError::invalid(format!(
                "scaler has {} channels, model.C = {}",
                s.mean.len(),
                m.channels
            )));
        }
    }

    let window = raw.tail(m.l_in);
    let standardized = match &scaler {
        Some(s) => s.transform(&window.values),
        None => window.values.clone(),
    };
    let x = Tensor::<f32>::from_f64(vec![1, m.l_in, m.channels], &standardized)?;
    let forecast = model.forward(&store, &x)?.values;
    let out: Vec<f64> = forecast.data().iter().map(|&v| v as f64).collect();
    let values = match &scaler {
        Some(s) => s.inverse(&out),
        None => out,
    };

    let last = *raw.timestamps.last().expect("at least L_in rows");
    let timestamps = (1..=m.l_pred as i32).map(|k| last + step * k).collect();
    let result = RawDataset {
        name: format!("{}_forecast", raw.name),
        timestamps,
        channels: raw.channels.clone(),
        values,
    };
    prepare_output(&cfg, &settings)?;
    let path = settings
        .forecast_output
        .clone()
        .unwrap_or_else(|| settings.output_dir.join("forecast.csv"));
    write_csv(&result, &path)?;
    eprintln!("wrote {} rows to {}", m.l_pred, path.display());
    Ok(())
}
