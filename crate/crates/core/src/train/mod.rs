//! Optimizers, schedules, data and the training loop.

pub mod data;
pub mod divergence;
pub mod optim;
pub mod schedule;

pub use data::{augment, load_dataset, Augment, Dataset, Split};
pub use divergence::{detect_divergence, DivergenceDetector, DivergenceReason, DivergenceRule};
pub use optim::{AdamW, Objective, Optimizer, OptimizerKind, Sam, Sgd, StepRule};
pub use schedule::{lr_at, Schedule};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{layer_diversity, DiversityProfile};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{NormMode, Param};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: String,
    pub label_smoothing: f64,
    pub augment: Augment,
    pub min_lr: f64,
    pub divergence: DivergenceRule,
    /// Validation images used for the diversity snapshots.
    pub probe_batch: usize,
}

fn default_weight_decay() -> f64 {
    0.05
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::AdamW
}

fn default_probe_batch() -> usize {
    32
}

/// Reference recipe batch size that learning rates are quoted against.
pub const REFERENCE_BATCH: usize = 1024;

/// Linear learning-rate scaling from the reference batch size.
pub fn scale_lr(reference_lr: f64, batch_size: usize) -> f64 {
    reference_lr * batch_size as f64 / REFERENCE_BATCH as f64
}

impl Default for TrainConfig {
    /// Desk recipe: 60 epochs at batch 128, peak lr 1e-3 scaled to the batch.
    fn default() -> Self {
        Self {
            lr: scale_lr(1e-3, 128),
            weight_decay: default_weight_decay(),
            optimizer: default_optimizer(),
            warmup_epochs: 5,
            total_epochs: 60,
            batch_size: 128,
            seed: 0,
            dataset: "synth:0:5000:10".into(),
            label_smoothing: 0.0,
            augment: Augment::default(),
            min_lr: scale_lr(1e-5, 128),
            divergence: DivergenceRule::default(),
            probe_batch: default_probe_batch(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be ≥ 0, got {}", self.weight_decay));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("min_lr", format!("must lie in [0, lr], got {}", self.min_lr));
        }
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return bad(
                "warmup_epochs",
                format!(
                    "must be < total_epochs ({} ≥ {})",
                    self.warmup_epochs, self.total_epochs
                ),
            );
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be ≥ 2 (batch norm needs a batch)".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(
                "label_smoothing",
                format!("must lie in [0, 1), got {}", self.label_smoothing),
            );
        }
        if self.probe_batch == 0 {
            return bad("probe_batch", "must be ≥ 1".into());
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversitySnapshot {
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub profile: DiversityProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs: Vec<EpochStats>,
    pub diverged: bool,
    /// Global optimizer step (0-based) at which divergence was declared.
    pub diverged_step: Option<usize>,
    pub divergence_reason: Option<String>,
    /// Validation top-1 after the last epoch; absent for diverged runs.
    pub final_top1: Option<f64>,
    pub wall_time_secs: f64,
    pub diversity: Vec<DiversitySnapshot>,
}

impl RunReport {
    /// Validation accuracy after `epoch` epochs, if that epoch ran.
    pub fn acc_at(&self, epoch: usize) -> Option<f64> {
        self.epochs.iter().find(|e| e.epoch == epoch).map(|e| e.val_acc)
    }

    /// The report with timing removed, for bit-exact comparisons.
    pub fn metrics_only(&self) -> RunReport {
        RunReport {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Cross-entropy on one batch of a model, as an [`Objective`].
pub struct BatchObjective<'m> {
    pub model: &'m mut Model,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub smoothing: f64,
}

impl Objective for BatchObjective<'_> {
    fn params(&self) -> &[Param] {
        self.model.store.params()
    }

    fn params_mut(&mut self) -> &mut [Param] {
        self.model.store.params_mut()
    }

    fn loss_and_grads(&mut self, first: bool) -> Result<(f64, Vec<Tensor>)> {
        let mode = NormMode::Train { update_stats: first };
        self.model
            .loss_and_grads(&self.images, &self.labels, self.smoothing, mode)
    }
}

/// Top-1 accuracy on `split` in eval mode; non-finite logits count as wrong.
pub fn evaluate(model: &mut Model, ds: &Dataset, split: &Split, batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (logits, _) = model.predict(&ds.batch(split, chunk), false)?;
        let k = logits.shape()[1];
        for (row, &i) in logits.data().chunks(k).zip(chunk) {
            if row.iter().all(|v| v.is_finite()) {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                    )
                    .0;
                correct += usize::from(arg == split.labels[i]);
            }
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Token-diversity profile of `model` on the first `n` validation images.
pub fn probe_diversity(model: &mut Model, ds: &Dataset, n: usize) -> Result<DiversityProfile> {
    let idx: Vec<usize> = (0..n.min(ds.val.len())).collect();
    let (_, trace) = model.predict(&ds.batch(&ds.val, &idx), true)?;
    let trace = trace.ok_or_else(|| Error::Contract("trace requested but not returned".into()))?;
    layer_diversity(&trace, true, format!("{}[0..{}]", ds.descriptor, idx.len()))
}

fn check_compatible(model_cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    if model_cfg.image_size != ds.image_size() {
        return Err(Error::Config(format!(
            "model.image_size {} does not match dataset images {}",
            model_cfg.image_size,
            ds.image_size()
        )));
    }
    if model_cfg.num_classes != ds.num_classes {
        return Err(Error::Config(format!(
            "model.num_classes {} does not match dataset classes {}",
            model_cfg.num_classes, ds.num_classes
        )));
    }
    Ok(())
}

/// Load the dataset named in `train_cfg` and train.
pub fn run_training(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<RunReport> {
    let ds = load_dataset(&train_cfg.dataset)?;
    train_on(&ds, model_cfg, train_cfg).map(|(_, report)| report)
}

/// Train a fresh model on an already-loaded dataset. The model is built
/// from `train_cfg.seed`; batch order and augmentation draw from a stream
/// derived from the same seed.
pub fn train_on(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(Model, RunReport)> {
    model_cfg.validate()?;
    cfg.validate()?;
    check_compatible(model_cfg, ds)?;
    let start = Instant::now();
    let mut model = Model::build(model_cfg, cfg.seed)?;
    let mut report = RunReport {
        model: model_cfg.clone(),
        train: cfg.clone(),
        epochs: Vec::new(),
        diverged: false,
        diverged_step: None,
        divergence_reason: None,
        final_top1: None,
        wall_time_secs: 0.0,
        diversity: Vec::new(),
    };
    if cfg.total_epochs == 0 {
        report.wall_time_secs = start.elapsed().as_secs_f64();
        return Ok((model, report));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let n = ds.train.len();
    // A trailing batch of one cannot be batch-normalized; drop it.
    let steps_per_epoch = if n % cfg.batch_size == 1 {
        n / cfg.batch_size
    } else {
        n.div_ceil(cfg.batch_size)
    };
    if steps_per_epoch == 0 {
        return Err(Error::Data(format!(
            "training split of {n} images is smaller than one batch"
        )));
    }
    let schedule = Schedule {
        peak: cfg.lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.total_epochs * steps_per_epoch,
        min_lr: cfg.min_lr,
    };
    let mut rule = cfg.optimizer.build(cfg.weight_decay);
    let mut detector = DivergenceDetector::new(cfg.divergence);
    let mid = cfg.total_epochs / 2;
    report.diversity.push(DiversitySnapshot {
        epoch: 0,
        profile: probe_diversity(&mut model, ds, cfg.probe_batch)?,
    });

    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    'epochs: for epoch in 1..=cfg.total_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for b in 0..steps_per_epoch {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let images = augment(&ds.batch(&ds.train, idx), cfg.augment, &mut rng);
            let mut obj = BatchObjective {
                model: &mut model,
                images,
                labels: ds.labels(&ds.train, idx),
                smoothing: cfg.label_smoothing,
            };
            lr = schedule.lr_at(step);
            let outcome = match rule.step(&mut obj, lr) {
                Ok(loss) => detector.observe_loss(loss).map(|r| r.to_string()).ok_or(loss),
                Err(Error::Diverged(msg)) => Ok(msg),
                Err(e) => return Err(e),
            };
            match outcome {
                Err(loss) => loss_sum += loss,
                Ok(reason) => {
                    log::info!("diverged at step {step}: {reason}");
                    report.diverged = true;
                    report.diverged_step = Some(step);
                    report.divergence_reason = Some(reason);
                    break 'epochs;
                }
            }
            step += 1;
        }
        let val_acc = evaluate(&mut model, ds, &ds.val, cfg.batch_size)?;
        report.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_acc,
            lr,
        });
        log::debug!(
            "epoch {epoch}: loss {:.4} val {:.4}",
            loss_sum / steps_per_epoch as f64,
            val_acc
        );
        if let Some(reason) = detector.observe_accuracy(epoch, cfg.total_epochs, val_acc, ds.num_classes) {
            report.diverged = true;
            report.diverged_step = Some(step.saturating_sub(1));
            report.divergence_reason = Some(reason.to_string());
            break;
        }
        if epoch == mid && mid != cfg.total_epochs {
            report.diversity.push(DiversitySnapshot {
                epoch,
                profile: probe_diversity(&mut model, ds, cfg.probe_batch)?,
            });
        }
    }
    if !report.diverged {
        report.final_top1 = report.epochs.last().map(|e| e.val_acc);
        report.diversity.push(DiversitySnapshot {
            epoch: cfg.total_epochs,
            profile: probe_diversity(&mut model, ds, cfg.probe_batch)?,
        });
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}
