//! Adam optimization with validation-loss early stopping, and set-level
//! evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{stack_pairs, SamplePair};
use crate::error::{Error, Result};
use crate::loss::{focal_tversky, supervised_loss, LossConfig};
use crate::metrics::{Confusion, MetricsRecord, THRESHOLD};
use crate::net::Model;
use crate::params::ParamSet;
use crate::real::Real;
use crate::tape::{Gradients, Tape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment buffers, one per parameter tensor, and the step
/// counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn check(&self, params: &ParamSet<T>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::InvalidState(format!(
                "{} moment buffers for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.len() != p.tensor.len() || v.len() != p.tensor.len() {
                return Err(Error::InvalidState(format!("moment buffers of {} have drifted from its shape", p.name)));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update from the gradients of a backward pass.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    state.check(params)?;
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let k = id.index();
        let g = grads.param(id);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g[i].as_f64());
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let step = cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            p[i] = T::of(p[i].as_f64() - step);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Smallest validation-loss decrease that counts as an improvement.
    pub min_delta: f64,
    /// Epoch `e` shuffles with seed `(seed + 1) ^ e`.
    pub seed: u64,
    pub loss: LossConfig,
    /// Worker threads for evaluation.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4,
            max_epochs: 300,
            patience: 10,
            min_delta: 1e-5,
            seed: 0,
            loss: LossConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::arg(format!("learning rate must be > 0, got {}", self.adam.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return Err(Error::arg("Adam betas must lie in [0, 1) and eps must be > 0"));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::arg("batch_size, patience and max_epochs must be >= 1"));
        }
        self.loss.validate()
    }
}

/// Stops once the monitored value has failed to improve by more than
/// `min_delta` for `patience` consecutive observations.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub best_epoch: usize,
    pub stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        let improved = value < self.best - self.min_delta;
        if improved {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Verdict { improved, stop: self.stale >= self.patience }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub n_images: usize,
    /// Mean per-image supervised loss over every active head.
    pub loss: f64,
    /// Mean per-image focal Tversky loss of the final map alone.
    pub final_ftl: f64,
    pub metrics: MetricsRecord,
}

fn evaluate_one<T: Real>(model: &Model<T>, pair: &SamplePair<T>, cfg: &LossConfig) -> Result<(f64, f64, Confusion)> {
    let mut tape = Tape::new(&model.params);
    let x = tape.constant(pair.image.clone());
    let out = model.forward(&mut tape, x)?;
    let loss = supervised_loss(&mut tape, &out, &pair.mask, cfg)?;
    let p = tape.value(out.final_map);
    let ftl = focal_tversky(p, &pair.mask, cfg)?;
    let counts = Confusion::of(p, &pair.mask, THRESHOLD)?;
    Ok((tape.value(loss).data()[0].as_f64(), ftl, counts))
}

/// Thresholds every final map at 0.5 and pools the confusion counts over the
/// whole set. With `threads > 1` images are sharded across scoped threads;
/// results are merged in set order, so the outcome does not depend on the
/// thread count.
pub fn evaluate<T: Real>(model: &Model<T>, set: &[SamplePair<T>], cfg: &LossConfig, threads: usize) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::arg("cannot evaluate an empty set"));
    }
    let threads = threads.clamp(1, set.len());
    let per_image: Vec<(f64, f64, Confusion)> = if threads == 1 {
        set.iter().map(|p| evaluate_one(model, p, cfg)).collect::<Result<_>>()?
    } else {
        let chunk = set.len().div_ceil(threads);
        let parts: Vec<Result<Vec<_>>> = std::thread::scope(|s| {
            let handles: Vec<_> = set
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|p| evaluate_one(model, p, cfg)).collect::<Result<Vec<_>>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(set.len());
        for part in parts {
            all.extend(part?);
        }
        all
    };
    let n = per_image.len() as f64;
    let loss = per_image.iter().map(|r| r.0).sum::<f64>() / n;
    let final_ftl = per_image.iter().map(|r| r.1).sum::<f64>() / n;
    let counts = per_image.iter().fold(Confusion::default(), |acc, r| acc + r.2);
    Ok(Evaluation { n_images: set.len(), loss, final_ftl, metrics: counts.record() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Evaluation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

pub const REPORT_HEADER: &str = "epoch,train_loss,val_loss,val_dsc,val_iou,val_recall";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let m = &e.val.metrics;
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.4},{:.4},{:.4}",
                e.epoch, e.train_loss, e.val.loss, m.dsc, m.iou, m.recall
            );
        }
        let _ = writeln!(
            out,
            "# best_epoch={} best_val_loss={:.6} epochs_run={} stopped_early={}",
            self.best_epoch,
            self.best_val_loss,
            self.epochs.len(),
            self.stopped_early
        );
        out
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Parameters and optimizer state at one point of a run.
#[derive(Clone, Debug)]
pub struct Snapshot<T: Real> {
    pub epoch: usize,
    pub params: ParamSet<T>,
    pub state: AdamState<T>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub report: TrainReport,
    pub best: Snapshot<T>,
    pub last: Snapshot<T>,
}

/// Per-epoch hook; returning `false` ends training after that epoch.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord) -> bool + 'a;

/// Runs minibatch Adam until early stopping or `max_epochs`, then restores
/// the parameters of the best validation epoch into `model`. `state` carries
/// optimizer moments across calls so that a resumed run continues its step
/// counter.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[SamplePair<T>],
    val_set: &[SamplePair<T>],
    cfg: &TrainConfig,
    state: Option<AdamState<T>>,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::arg("training and validation sets must be nonempty"));
    }
    let mut state = state.unwrap_or_else(|| AdamState::new(&model.params));
    state.check(&model.params)?;
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best = Snapshot { epoch: 0, params: model.params.clone(), state: state.clone() };
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1) ^ epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let pairs: Vec<&SamplePair<T>> = idx.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = stack_pairs(&pairs)?;
            let grads = {
                let mut tape = Tape::new(&model.params);
                let xv = tape.constant(x);
                let out = model.forward(&mut tape, xv)?;
                let loss = supervised_loss(&mut tape, &out, &y, &cfg.loss)?;
                let value = tape.value(loss).data()[0].as_f64();
                if !value.is_finite() {
                    return Err(Error::NumericalDivergence { epoch, batch: b + 1, value });
                }
                total += value;
                batches += 1;
                tape.backward(loss)?
            };
            adam_step(&mut model.params, &grads, &mut state, &cfg.adam)?;
        }
        let val = evaluate(model, val_set, &cfg.loss, cfg.threads)?;
        if !val.loss.is_finite() {
            return Err(Error::NumericalDivergence { epoch, batch: 0, value: val.loss });
        }
        let record = EpochRecord { epoch, train_loss: total / batches as f64, val };
        epochs.push(record);
        let verdict = stopper.observe(epoch, val.loss);
        if verdict.improved {
            best = Snapshot { epoch, params: model.params.clone(), state: state.clone() };
        }
        let proceed = hook.as_mut().is_none_or(|h| h(&record));
        if verdict.stop {
            stopped_early = true;
            break;
        }
        if !proceed {
            break;
        }
    }

    let last = Snapshot { epoch: epochs.len(), params: model.params.clone(), state };
    model.params.copy_values_from(&best.params)?;
    let report = TrainReport { epochs, best_epoch: stopper.best_epoch, best_val_loss: stopper.best, stopped_early };
    Ok(TrainOutcome { report, best, last })
}
