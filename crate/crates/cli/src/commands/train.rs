use std::io::Write;
use std::time::Instant;

use dpanet::checkpoint::{load_checkpoint, save_checkpoint};
use dpanet::data::{PreparedData, Split};
use dpanet::trainer::{evaluate_timed, train};
use dpanet::Model;

use super::{append_lines, create_file, load_dataset, prepare_output, save_scaler};
use crate::config::RunConfig;
use crate::CliError;

pub fn run_train(mut cfg: RunConfig) -> Result<(), CliError> {
    let settings = cfg.resolve()?;
    let raw = load_dataset(&mut cfg, &settings)?;
    let m = &settings.model;
    let data = PreparedData::new(raw, settings.policy, m.l_in, m.l_pred)?;
    prepare_output(&cfg, &settings)?;
    let dir = &settings.output_dir;

    let (model, mut store) = Model::new::<f32>(m, settings.seed)?;
    eprintln!(
        "training {} on {} ({} train windows, {} parameters)",
        m.variant,
        data.raw.name,
        data.sampler(Split::Train).num_windows(),
        store.num_scalars()
    );
    let history_path = dir.join("history.jsonl");
    let mut history = create_file(&history_path)?;
    let mut write_err = None;
    let started = Instant::now();
    let outcome = train(&model, &mut store, &data, &settings.train, |rec| {
        let line = serde_json::to_string(rec).expect("epoch record serializes");
        if let Err(e) = writeln!(history, "{line}") {
            write_err.get_or_insert(e);
        }
        eprintln!(
            "epoch {:>3}  steps {:>6}  train {:.6}  val {:.6}{}",
            rec.epoch,
            rec.steps,
            rec.train_loss,
            rec.val_mse,
            if rec.best { "  *" } else { "" }
        );
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&history_path, e));
    }
    let train_secs = started.elapsed().as_secs_f64();

    save_checkpoint(&settings.checkpoint, m, &outcome.best)?;
    save_scaler(&settings.checkpoint, &data.scaler)?;
    if let Some(d) = outcome.diverged {
        return Err(CliError::Numerical(format!(
            "training diverged at epoch {}, step {}: {}; last good parameters saved to {}",
            d.epoch,
            d.step,
            d.msg,
            settings.checkpoint.display()
        )));
    }

    let mut lines = Vec::new();
    let mut eval_secs = 0.0;
    for split in [Split::Val, Split::Test] {
        let ev = evaluate_timed(&model, &outcome.best, &data, split, settings.eval_batch)?;
        eval_secs += ev.wall_clock_secs;
        println!("{}", ev.report.to_json_line());
        lines.push(ev.report.to_json_line());
    }
    append_lines(&dir.join("report.jsonl"), &lines)?;
    let timing = serde_json::json!({
        "command": "train",
        "steps": outcome.steps,
        "epochs": outcome.history.len(),
        "train_secs": train_secs,
        "eval_secs": eval_secs,
    });
    append_lines(&dir.join("timing.jsonl"), &[timing.to_string()])?;
    let best = outcome.best_epoch.map_or_else(|| "none".to_string(), |e| e.to_string());
    eprintln!("best epoch {best}, checkpoint {}", settings.checkpoint.display());
    Ok(())
}

pub fn run_eval(mut cfg: RunConfig) -> Result<(), CliError> {
    let settings = cfg.resolve()?;
    let raw = load_dataset(&mut cfg, &settings)?;
    let m = &settings.model;
    let data = PreparedData::new(raw, settings.policy, m.l_in, m.l_pred)?;
    let (model, store) = load_checkpoint::<f32>(&settings.checkpoint, m)?;
    prepare_output(&cfg, &settings)?;
    let ev = evaluate_timed(&model, &store, &data, settings.eval_split, settings.eval_batch)?;
    let line = ev.report.to_json_line();
    println!("{line}");
    let dir = &settings.output_dir;
    append_lines(&dir.join("report.jsonl"), &[line])?;
    let timing = serde_json::json!({
        "command": "eval",
        "split": settings.eval_split.to_string(),
        "eval_secs": ev.wall_clock_secs,
    });
    append_lines(&dir.join("timing.jsonl"), &[timing.to_string()])
}
