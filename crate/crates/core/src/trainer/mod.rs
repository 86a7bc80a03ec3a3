//! Unsupervised training: Adam, seeded batching, metrics and checkpoints.

mod adam;
mod pose;

pub use adam::{Adam, AdamState};
pub use pose::{train, validate, PoseTask};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::energy::{EnergyError, EnergyReport};
use crate::format::write_atomic;
use crate::model::{Checkpoint, ModelError, ParamSet};
use crate::rig::RigError;
use crate::tensor::TensorError;

/// Environment variable holding the number of batch workers.
pub const WORKERS_ENV: &str = "DRAPE_WORKERS";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at epoch {epoch}, step {step}; last good checkpoint: {}", last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    NonFinite {
        epoch: usize,
        step: u64,
        last_good: Option<PathBuf>,
    },
    #[error("loss diverged at epoch {epoch}, step {step}: {loss} exceeds {factor} x initial loss {initial}")]
    Diverged {
        epoch: usize,
        step: u64,
        loss: f64,
        initial: f64,
        factor: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFinite { .. }
                | Self::Diverged { .. }
                | Self::Tensor(TensorError::NonFinite { .. })
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Steps of linear warmup from 0 to `lr`.
    pub warmup_steps: u64,
    /// Cosine decay target as a fraction of `lr` at the final epoch;
    /// 1 disables decay.
    pub lr_final_factor: f64,
    /// Learning rate multiplier for trainable skinning weight logits.
    pub weights_lr_scale: f64,
    pub seed: u64,
    /// Validate every this many epochs (0: only after the last).
    pub validate_every: usize,
    /// Checkpoint every this many epochs (0: never during training).
    pub checkpoint_every: usize,
    pub divergence_factor: f64,
    /// Batch workers; falls back to [`WORKERS_ENV`] and then the core count.
    pub workers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            epochs: 30,
            lr: 1e-3,
            warmup_steps: 100,
            lr_final_factor: 1.0,
            weights_lr_scale: 0.1,
            seed: 0,
            validate_every: 1,
            checkpoint_every: 0,
            divergence_factor: 1e3,
            workers: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &str, why: &str| Err(TrainError::Config(format!("{field} {why}")));
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive and finite");
        }
        if !(self.lr_final_factor.is_finite() && self.lr_final_factor > 0.0 && self.lr_final_factor <= 1.0)
        {
            return bad("lr_final_factor", "must be in (0, 1]");
        }
        if !(self.weights_lr_scale.is_finite() && self.weights_lr_scale > 0.0) {
            return bad("weights_lr_scale", "must be positive and finite");
        }
        if self.workers == Some(0) {
            return bad("workers", "must be at least 1");
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor", "must exceed 1");
        }
        Ok(())
    }

    /// Rate at 1-based `step` during 0-based `epoch`.
    pub fn lr_at(&self, step: u64, epoch: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let f = self.lr_final_factor;
        let decay = if f >= 1.0 || self.epochs <= 1 {
            1.0
        } else {
            let s = epoch as f64 / (self.epochs - 1) as f64;
            f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
        };
        self.lr * warm * decay
    }
}

/// A model plus the loss it is trained under.
pub trait Task: Sync {
    type Sample: Sync;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Learning-rate multiplier per parameter tensor.
    fn lr_scales(&self, cfg: &TrainConfig) -> Vec<f64>;
    /// Loss terms and gradients for one sample.
    fn sample_grad(&self, sample: &Self::Sample) -> Result<(EnergyReport, Vec<Vec<f64>>), TrainError>;
    /// Mean metrics over samples; never mutates parameters.
    fn evaluate(&self, samples: &[Self::Sample]) -> Result<EnergyReport, TrainError>;
    fn checkpoint(&self, optimizer: Option<AdamState>) -> Checkpoint;
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train: EnergyReport,
    pub validation: Option<EnergyReport>,
    pub wall_time: f64,
}

impl EpochLog {
    pub fn to_json(&self) -> serde_json::Value {
        let t = &self.train;
        let mut v = json!({
            "epoch": self.epoch,
            "step": self.step,
            "lr": self.lr,
            "loss": {
                "total": t.total, "edge": t.edge, "bend": t.bend,
                "collision": t.collision, "gravity": t.gravity, "pin": t.pin,
            },
            "wall_time": self.wall_time,
        });
        if let Some(r) = &self.validation {
            v["edge_mm"] = json!(r.edge_mm);
            v["collision_ratio"] = json!(r.collision_ratio);
            v["per_layer_collision"] = json!(r.per_layer_collision);
            v["validation"] = serde_json::to_value(r).expect("report serializes");
        }
        v
    }
}

/// Where training writes its artifacts; every field is optional.
#[derive(Clone, Debug, Default)]
pub struct RunSink {
    pub metrics_log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: Vec<EpochLog>,
    pub optimizer: AdamState,
    pub last_checkpoint: Option<PathBuf>,
    pub validation: Option<EnergyReport>,
}

/// Worker count from [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, TrainError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    for e in log {
        writeln!(buf, "{}", e.to_json())?;
    }
    write_atomic(path, &buf)?;
    Ok(())
}

fn all_finite(grads: &[Vec<f64>]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}

/// Runs one batch: per-sample gradients on the worker pool, summed in
/// sample order, then divided by the batch size.
pub fn batch_gradient<T: Task>(
    task: &T,
    pool: &rayon::ThreadPool,
    batch: &[&T::Sample],
) -> Result<(EnergyReport, Vec<Vec<f64>>), TrainError> {
    use rayon::prelude::*;
    let results: Vec<_> = pool.install(|| batch.par_iter().map(|s| task.sample_grad(s)).collect());
    let mut grads: Vec<Vec<f64>> = task.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
    let mut reports = Vec::with_capacity(batch.len());
    for r in results {
        let (rep, g) = r?;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, v) in acc.iter_mut().zip(gi) {
                *a += v;
            }
        }
        reports.push(rep);
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grads {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    Ok((EnergyReport::mean(&reports), grads))
}

/// The training loop shared by pose and resize models. `epoch_samples`
/// yields the ordered training samples of an epoch from the seeded stream;
/// batches are consecutive slices of it.
pub fn run<T: Task>(
    task: &mut T,
    mut epoch_samples: impl FnMut(usize, &mut ChaCha8Rng) -> Vec<T::Sample>,
    validation: &[T::Sample],
    cfg: &TrainConfig,
    sink: &RunSink,
    resume: Option<AdamState>,
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    let pool = thread_pool(cfg.workers.unwrap_or_else(worker_count))?;
    let adam = Adam::default();
    let mut state = match resume {
        Some(s) if s.matches(task.params()) => s,
        Some(_) => {
            return Err(TrainError::Config(
                "optimizer state does not match the parameters".into(),
            ))
        }
        None => AdamState::new(task.params()),
    };
    let scales = task.lr_scales(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let mut initial: Option<f64> = None;
    let mut final_validation = None;
    let start = Instant::now();
    if let Some(dir) = &sink.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    for epoch in 0..cfg.epochs {
        let samples = epoch_samples(epoch, &mut rng);
        let mut reports = Vec::new();
        let mut lr = 0.0;
        for chunk in samples.chunks(cfg.batch) {
            let refs: Vec<&T::Sample> = chunk.iter().collect();
            let step = state.step + 1;
            let res = batch_gradient(task, &pool, &refs);
            let (rep, grads) = match res {
                Err(e) if e.is_numeric() => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        last_good,
                    })
                }
                other => other?,
            };
            if !rep.total.is_finite() || !all_finite(&grads) {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    last_good,
                });
            }
            let init = *initial.get_or_insert(rep.total.abs().max(1e-12));
            if rep.total.abs() > cfg.divergence_factor * init {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    loss: rep.total,
                    initial: init,
                    factor: cfg.divergence_factor,
                });
            }
            lr = cfg.lr_at(step, epoch);
            let rates: Vec<f64> = scales.iter().map(|s| s * lr).collect();
            adam.step(task.params_mut(), &grads, &mut state, &rates);
            reports.push(rep);
        }
        let train = EnergyReport::mean(&reports);
        let last = epoch + 1 == cfg.epochs;
        let validate_now = !validation.is_empty()
            && (last || (cfg.validate_every > 0 && (epoch + 1) % cfg.validate_every == 0));
        let validation_report = if validate_now {
            Some(task.evaluate(validation)?)
        } else {
            None
        };
        if let Some(v) = &validation_report {
            final_validation = Some(v.clone());
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            step: state.step,
            lr,
            train,
            validation: validation_report,
            wall_time: start.elapsed().as_secs_f64(),
        };
        info!("{}", entry.to_json());
        log.push(entry);
        if let Some(path) = &sink.metrics_log {
            write_log(path, &log)?;
        }
        if let Some(dir) = &sink.checkpoint_dir {
            if cfg.checkpoint_every > 0 && ((epoch + 1) % cfg.checkpoint_every == 0 || last) {
                let path = dir.join(format!("epoch-{:04}.ckpt", epoch + 1));
                task.checkpoint(Some(state.clone())).save(&path)?;
                last_good = Some(path);
            }
        }
    }
    if let Some(path) = &sink.metrics_log {
        if log.is_empty() {
            write_log(path, &log)?;
        }
    }
    Ok(TrainSummary {
        log,
        optimizer: state,
        last_checkpoint: last_good,
        validation: final_validation,
    })
}

/// Seeded shuffle of `0..n`, used for epoch ordering.
pub fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests;
