//! MSE training with Adam and early stopping, and MSE/MAE evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{PreparedData, Split, WindowSampler};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Mode, ParamStore, Session};

/// Mean of squared differences over all elements.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dims("mse_loss", tape.shape(pred), tape.shape(target)));
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            grad_clip_norm: 5.0,
            seed: 2024,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0) {
            errs.push(format!("train.lr = {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            errs.push("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            errs.push("train.eps must be positive".into());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be positive".into());
        }
        if self.max_epochs == 0 {
            errs.push("train.max_epochs must be positive".into());
        }
        if self.patience > self.max_epochs {
            errs.push(format!(
                "train.patience = {} exceeds train.max_epochs = {}",
                self.patience, self.max_epochs
            ));
        }
        if !(self.grad_clip_norm > 0.0) {
            errs.push("train.grad_clip_norm must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Real>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update after global-norm clipping. `grads` is in
/// store order; `None` counts as zero. Returns the pre-clip gradient norm.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    let mut sq = 0.0;
    for (id, g) in store.ids().zip(grads) {
        if let Some(g) = g {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` at element {pos}",
                    store.name(id)
                )));
            }
            sq += g.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    let clip = if norm > cfg.grad_clip_norm { cfg.grad_clip_norm / norm } else { 1.0 };

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let Some(g) = &grads[k] else { continue };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let p = store.get_mut(id).data_mut();
        for j in 0..p.len() {
            let gj = g[j].to_f64_lossy() * clip;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let update = cfg.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            p[j] = T::from_f64_lossy(p[j].to_f64_lossy() - update);
        }
    }
    Ok(norm)
}

/// Stops after `patience` consecutive epochs without a new best.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    /// Records one validation score; returns `true` if it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score < self.best {
            self.best = score;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.bad_epochs >= self.patience
    }
}

/// One line of the loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub epoch: usize,
    pub step: usize,
    pub msg: String,
}

impl From<DivergenceInfo> for Error {
    fn from(d: DivergenceInfo) -> Self {
        Error::Divergence {
            epoch: d.epoch,
            step: d.step,
            msg: d.msg,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters with the best validation MSE; on divergence, the last
    /// finite parameters if no epoch completed.
    pub best: ParamStore<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub steps: usize,
    pub stopped_early: bool,
    pub diverged: Option<DivergenceInfo>,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and gradients of one batch with dropout seeded by `seed`.
pub fn batch_gradients<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    seed: u64,
) -> Result<(f64, Vec<Option<Vec<T>>>)> {
    let mut sess = Session::new(store, Mode::Train { seed });
    let x = sess.tape.constant(input.clone());
    let y = sess.tape.constant(target.clone());
    let out = model.forward_vars(&mut sess, x)?;
    let loss = mse_loss(&mut sess.tape, out.values, y)?;
    let value = sess.tape.value(loss).data()[0].to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    sess.tape.backward(loss)?;
    Ok((value, sess.param_grads()))
}

/// Trains `store` in place and returns the best-validation parameters and
/// the per-epoch history. Deterministic for a fixed `cfg.seed`.
pub fn train<T: Real>(
    model: &Model,
    store: &mut ParamStore<T>,
    data: &PreparedData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let sampler = data.sampler(Split::Train);
    let mut adam = AdamState::new(store);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = store.clone();
    let mut history = Vec::new();
    let mut steps = 0usize;
    let mut diverged = None;
    let cap = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 1..=cfg.max_epochs {
        if steps >= cap {
            break;
        }
        let order = sampler.order(mix(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if steps >= cap {
                break;
            }
            let batch = sampler.batch::<T>(chunk);
            let step_seed = mix(cfg.seed ^ 0xD0_70, steps as u64);
            let result = batch_gradients(model, store, &batch.input, &batch.target, step_seed)
                .and_then(|(loss, grads)| adam_step(store, &grads, &mut adam, cfg).map(|_| loss));
            match result {
                Ok(loss) => {
                    loss_sum += loss;
                    batches += 1;
                    steps += 1;
                }
                Err(e) if e.is_numerical() => {
                    diverged = Some(DivergenceInfo {
                        epoch,
                        step: steps,
                        msg: e.to_string(),
                    });
                    if history.is_empty() {
                        best = store.clone();
                    }
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(id) = store
            .iter()
            .find(|(_, _, t)| !t.is_finite())
            .map(|(id, _, _)| id)
        {
            diverged = Some(DivergenceInfo {
                epoch,
                step: steps,
                msg: format!("parameter `{}` became non-finite", store.name(id)),
            });
            break;
        }
        let val = evaluate(model, store, data, Split::Val, cfg.batch_size)?;
        if !val.mse.is_finite() {
            diverged = Some(DivergenceInfo {
                epoch,
                step: steps,
                msg: "validation MSE is not finite".into(),
            });
            break;
        }
        let improved = stopper.observe(epoch, val.mse);
        if improved {
            best = store.clone();
        }
        let record = EpochRecord {
            epoch,
            steps,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            val_mse: val.mse,
            best: improved,
        };
        on_epoch(&record);
        history.push(record);
        if stopper.should_stop() {
            return Ok(TrainOutcome {
                best,
                history,
                best_epoch: stopper.best_epoch,
                steps,
                stopped_early: true,
                diverged,
            });
        }
    }
    Ok(TrainOutcome {
        best,
        history,
        best_epoch: stopper.best_epoch,
        steps,
        stopped_early: false,
        diverged,
    })
}

/// Metrics of one split. Serializes to a byte-stable record; timing is
/// reported separately by [`Evaluation`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub wall_clock_secs: f64,
}

/// Sequential pass over every window of `split` with an arbitrary predictor
/// mapping `(B, L_in, C)` inputs to `(B, L_pred, C)` forecasts.
pub fn evaluate_with<T: Real>(
    sampler: &WindowSampler<'_>,
    batch_size: usize,
    mut predict: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<(f64, f64, usize)> {
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut count = 0usize;
    let starts = sampler.starts();
    for chunk in starts.chunks(batch_size.max(1)) {
        let batch = sampler.batch::<T>(chunk);
        let pred = predict(&batch.input)?;
        if pred.shape() != batch.target.shape() {
            return Err(Error::dims("evaluate", pred.shape(), batch.target.shape()));
        }
        for (p, t) in pred.data().iter().zip(batch.target.data()) {
            let e = p.to_f64_lossy() - t.to_f64_lossy();
            sq += e * e;
            abs += e.abs();
        }
        count += pred.numel();
    }
    if count == 0 {
        return Err(Error::Split(format!("{} split has no complete windows", sampler.split)));
    }
    Ok((sq / count as f64, abs / count as f64, sampler.num_windows()))
}

/// MSE and MAE of the model over all windows of `split`.
pub fn evaluate<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    data: &PreparedData,
    split: Split,
    batch_size: usize,
) -> Result<EvalReport> {
    Ok(evaluate_timed(model, store, data, split, batch_size)?.report)
}

pub fn evaluate_timed<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    data: &PreparedData,
    split: Split,
    batch_size: usize,
) -> Result<Evaluation> {
    let start = Instant::now();
    let sampler = data.sampler(split);
    let (mse, mae, windows) = evaluate_with(&sampler, batch_size, |x| Ok(model.forward(store, x)?.values))?;
    Ok(Evaluation {
        report: EvalReport {
            split: split.to_string(),
            horizon: model.config.l_pred,
            mse,
            mae,
            windows,
            fingerprint: model.config.fingerprint(),
        },
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}
