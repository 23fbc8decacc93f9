use std::fmt::Write as _;

use dpanet::data::{PreparedData, Split};
use dpanet::trainer::{evaluate, train};
use dpanet::{make_variant, ModelConfig, Variant};

use super::{append_lines, load_dataset, prepare_output};
use crate::config::RunConfig;
use crate::CliError;

/// Published ETTm2 ablation results as `(MSE, MAE)`.
pub fn paper_reference(variant: Variant, horizon: usize) -> Option<(f64, f64)> {
    let row = match horizon {
        96 => [(0.173, 0.255), (0.182, 0.276), (0.186, 0.259), (0.215, 0.295)],
        192 => [(0.233, 0.297), (0.242, 0.325), (0.240, 0.319), (0.268, 0.412)],
        336 => [(0.291, 0.335), (0.316, 0.362), (0.309, 0.355), (0.342, 0.468)],
        720 => [(0.390, 0.395), (0.412, 0.417), (0.426, 0.409), (0.461, 0.472)],
        _ => return None,
    };
    let col = match variant {
        Variant::Full => 0,
        Variant::TemporalOnly => 1,
        Variant::FrequencyOnly => 2,
        Variant::NoCrossFusion => 3,
    };
    Some(row[col])
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub horizon: usize,
    /// `None` when training diverged.
    pub metrics: Option<(f64, f64)>,
}

fn format_table(dataset: &str, rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>7}  {:>9} {:>9}   {:>9} {:>9}",
        "variant", "horizon", "MSE", "MAE", "ETTm2 MSE", "ETTm2 MAE"
    );
    let _ = writeln!(out, "{}", "-".repeat(67));
    for r in rows {
        let (mse, mae) = match r.metrics {
            Some((a, b)) => (format!("{a:.4}"), format!("{b:.4}")),
            None => ("diverged".into(), "-".into()),
        };
        let (pm, pa) = match paper_reference(r.variant, r.horizon) {
            Some((a, b)) => (format!("{a:.3}"), format!("{b:.3}")),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            out,
            "{:<16} {:>7}  {mse:>9} {mae:>9}   {pm:>9} {pa:>9}",
            r.variant.as_str(),
            r.horizon
        );
    }
    let _ = write!(
        out,
        "measured on {dataset}; ETTm2 columns are the published reference, not targets at this scale"
    );
    out
}

pub fn run_ablate(mut cfg: RunConfig) -> Result<(), CliError> {
    let settings = cfg.resolve()?;
    let raw = load_dataset(&mut cfg, &settings)?;
    prepare_output(&cfg, &settings)?;
    let dir = &settings.output_dir;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let prepared = settings
        .horizons
        .iter()
        .map(|&h| PreparedData::new(raw.clone(), settings.policy, settings.model.l_in, h).map(|d| (h, d)))
        .collect::<Result<Vec<_>, _>>()?;
    for (horizon, data) in &prepared {
        let horizon = *horizon;
        for variant in Variant::ALL {
            let model_cfg = ModelConfig {
                l_pred: horizon,
                variant,
                ..settings.model.clone()
            };
            let (model, mut store) = make_variant::<f32>(&model_cfg, settings.seed)?;
            eprintln!("ablate: {variant} at horizon {horizon}");
            let outcome = train(&model, &mut store, data, &settings.train, |_| {})?;
            let metrics = if outcome.diverged.is_some() {
                None
            } else {
                let report = evaluate(&model, &outcome.best, data, Split::Test, settings.eval_batch)?;
                records.push(
                    serde_json::json!({
                        "variant": variant.as_str(),
                        "horizon": horizon,
                        "mse": report.mse,
                        "mae": report.mae,
                        "windows": report.windows,
                        "fingerprint": report.fingerprint,
                    })
                    .to_string(),
                );
                Some((report.mse, report.mae))
            };
            rows.push(AblationRow {
                variant,
                horizon,
                metrics,
            });
        }
    }
    let table = format_table(&raw.name, &rows);
    println!("{table}");
    let table_path = dir.join("ablation.txt");
    std::fs::write(&table_path, format!("{table}\n")).map_err(|e| CliError::io(&table_path, e))?;
    append_lines(&dir.join("ablation.jsonl"), &records)?;
    let diverged: Vec<String> = rows
        .iter()
        .filter(|r| r.metrics.is_none())
        .map(|r| format!("{}@{}", r.variant, r.horizon))
        .collect();
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("training diverged for {}", diverged.join(", "))))
    }
}
