use dpanet::data::{synth_multiperiodic, write_csv};
use dpanet::gradcheck::run_filtered;
use dpanet::numerics::Fault;

use super::{append_lines, prepare_output};
use crate::config::RunConfig;
use crate::{CliError, FaultArg};

pub fn run_gradcheck(cfg: RunConfig, only: &[String], fault: Option<FaultArg>) -> Result<(), CliError> {
    let settings = cfg.resolve()?;
    prepare_output(&cfg, &settings)?;
    let fault = fault.map(|f| match f {
        FaultArg::SoftmaxBackward => Fault::SoftmaxBackward,
    });
    let report = run_filtered(fault, |name| only.is_empty() || only.iter().any(|o| o == name))?;
    if report.components.is_empty() {
        return Err(CliError::invalid(format!("no gradcheck component matches {only:?}")));
    }
    let width = report.components.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut lines = Vec::new();
    for c in &report.components {
        let ok = c.max_error < report.threshold;
        println!(
            "{:<width$}  {:>6} scalars  max rel err {:.3e}  {}",
            c.name,
            c.scalars,
            c.max_error,
            if ok { "ok" } else { "FAIL" }
        );
        lines.push(
            serde_json::json!({
                "component": c.name,
                "scalars": c.scalars,
                "max_error": c.max_error,
                "threshold": report.threshold,
                "passed": ok,
            })
            .to_string(),
        );
    }
    let path = settings.output_dir.join("gradcheck.jsonl");
    std::fs::write(&path, "").map_err(|e| CliError::io(&path, e))?;
    append_lines(&path, &lines)?;
    if report.passed() {
        println!("all {} components below {:.0e}", report.components.len(), report.threshold);
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed for {}",
            report.failures().join(", ")
        )))
    }
}

pub fn run_synth(cfg: RunConfig) -> Result<(), CliError> {
    let settings = cfg.resolve()?;
    let s = &settings.synth;
    let ds = synth_multiperiodic(s.rows, s.channels, &s.periods, &s.amplitudes, s.noise, settings.seed)?;
    prepare_output(&cfg, &settings)?;
    if let Some(parent) = s.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    write_csv(&ds, &s.output)?;
    eprintln!("wrote {} rows x {} channels to {}", s.rows, s.channels, s.output.display());
    Ok(())
}
