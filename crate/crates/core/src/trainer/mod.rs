//! Training loop: AdamW, learning-rate schedules, gradient accumulation,
//! early stopping on validation accuracy and, for SVD-form adapters, rank
//! allocation after every optimizer step.

mod optim;
mod schedule;

pub use optim::{lowered_learning_rate, AdamW, OptimizerConfig, LR_PRESETS};
pub use schedule::{ScheduleConfig, ScheduleKind};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, AdapterSet};
use crate::allocator::{
    svd_active_total, Allocation, Allocator, BudgetSchedule, PruneEvent, SensitivityEstimator,
    SensitivityMode, DEFAULT_BETA,
};
use crate::error::{Error, Result};
use crate::qformer::{batch_logits, ModelInputs, QFormer};
use crate::scalar::Real;
use crate::tasks::{Dataset, Sample};
use crate::tensor::{Graph, Var};

/// Rank-allocation settings for SVD-form adapters. Epoch counts are
/// converted to optimizer steps once the epoch length is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocatorConfig {
    /// Average final rank per adapter; the pooled target is this times the
    /// number of adapters.
    pub r_target: usize,
    /// Epochs at the full budget before decay starts.
    pub warmup_epochs: usize,
    /// Epoch at which the budget reaches the target.
    pub final_epochs: usize,
    pub beta_sens: f64,
    pub beta_unc: f64,
    pub mode: SensitivityMode,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            r_target: 8,
            warmup_epochs: 1,
            final_epochs: 8,
            beta_sens: DEFAULT_BETA,
            beta_unc: DEFAULT_BETA,
            mode: SensitivityMode::Smoothed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub max_epochs: usize,
    /// Epochs without strict validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub batch_size: usize,
    pub grad_accum_iters: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleKind,
    /// Warmup length for the cosine schedule; defaults to one epoch.
    pub warmup_steps: Option<usize>,
    /// Coefficient of the orthogonality penalty on SVD-form factors; 0 disables.
    pub orth_reg: f64,
    pub allocator: AllocatorConfig,
    /// Restart once at a lower learning rate when the loss diverges.
    pub divergence_retry: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_epochs: 15,
            patience: 3,
            batch_size: 4,
            grad_accum_iters: 4,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleKind::LinearDecay,
            warmup_steps: None,
            orth_reg: 0.1,
            allocator: AllocatorConfig::default(),
            divergence_retry: false,
        }
    }
}

impl RunConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_iters
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.grad_accum_iters == 0 {
            return Err(Error::Config(
                "max_epochs, batch_size and grad_accum_iters must be positive".into(),
            ));
        }
        if !(self.optimizer.learning_rate >= 0.0) || !(self.orth_reg >= 0.0) {
            return Err(Error::Config("learning rate and orth_reg must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    pub active_rank_total: usize,
}

/// Model state at one point of training.
#[derive(Clone, Debug)]
pub struct Snapshot<T> {
    pub model: QFormer<T>,
    pub adapters: Option<AdapterSet<T>>,
}

#[derive(Clone, Debug)]
pub struct TrainResult<T> {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch with the best validation accuracy (earliest on ties).
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub best: Snapshot<T>,
    pub prune_events: Vec<PruneEvent>,
    pub learning_rate: f64,
    pub retried: bool,
    pub steps: usize,
}

/// Hooks into a training run.
pub trait TrainObserver<T> {
    fn on_allocation(&mut self, _step: usize, _allocation: &Allocation, _set: &AdapterSet<T>) {}
    fn on_epoch(&mut self, _metrics: &EpochMetrics) {}
}

pub struct NoObserver;

impl<T> TrainObserver<T> for NoObserver {}

/// Patience on strictly improving accuracy; ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records `metric` for `epoch`; true when training should stop.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        match self.best {
            Some((_, b)) if metric <= b => self.stale += 1,
            _ => {
                self.best = Some((epoch, metric));
                self.stale = 0;
            }
        }
        self.patience > 0 && self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best.is_some_and(|(e, _)| e == epoch)
    }
}

pub type Example<T> = (ModelInputs<T>, usize);

pub fn prepare<T: Real>(samples: &[Sample], n_img: usize, image_dim: usize) -> Result<Vec<Example<T>>> {
    samples
        .iter()
        .map(|s| Ok((s.inputs(n_img, image_dim)?, s.label)))
        .collect()
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax accuracy over `examples` (0 for an empty split).
pub fn evaluate<T: Real>(
    model: &QFormer<T>,
    adapters: Option<&AdapterSet<T>>,
    examples: &[Example<T>],
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (x, y) in examples {
        let mut g = Graph::new();
        let logits = model.logits(&mut g, x, adapters)?;
        if argmax(g.value(logits)) == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn micro_loss<T: Real>(
    g: &mut Graph<T>,
    model: &QFormer<T>,
    adapters: Option<&AdapterSet<T>>,
    chunk: &[&Example<T>],
    weight: T,
    orth_reg: f64,
) -> Result<Var> {
    let inputs: Vec<_> = chunk.iter().map(|(x, _)| x).collect();
    let labels: Vec<_> = chunk.iter().map(|(_, y)| *y).collect();
    let logits = batch_logits(g, model, adapters, &inputs)?;
    let mut loss = g.cross_entropy(logits, &labels)?;
    if orth_reg > 0.0 {
        if let Some(pen) = adapters.map(|s| s.orthogonality_penalty(g)).transpose()?.flatten() {
            let pen = g.scale(pen, T::lit(orth_reg));
            loss = g.add(loss, pen)?;
        }
    }
    Ok(g.scale(loss, weight))
}

/// Zeroes gradients, accumulates them over `batch` in micro-batches of
/// `micro` examples (each micro loss weighted by its share of the batch, so
/// the sum equals the full-batch mean) and applies one optimizer step.
/// Gradients are left in place for the allocator. Returns the batch loss.
pub fn train_step<T: Real>(
    model: &mut QFormer<T>,
    mut adapters: Option<&mut AdapterSet<T>>,
    opt: &mut AdamW<T>,
    batch: &[&Example<T>],
    micro: usize,
    lr_multiplier: f64,
    orth_reg: f64,
) -> Result<f64> {
    if batch.is_empty() || micro == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    model.zero_grads();
    if let Some(set) = adapters.as_deref_mut() {
        set.zero_grads();
    }
    let mut total = 0.0;
    for chunk in batch.chunks(micro) {
        let weight = T::from_usize_lossy(chunk.len()) / T::from_usize_lossy(batch.len());
        let mut g = Graph::new();
        let loss = micro_loss(&mut g, model, adapters.as_deref(), chunk, weight, orth_reg)?;
        total += g.scalar_value(loss).as_f64();
        let grads = g.backward(loss)?;
        model.accumulate_grads(&g, &grads)?;
        if let Some(set) = adapters.as_deref_mut() {
            set.accumulate_grads(&g, &grads)?;
        }
    }
    match adapters {
        Some(set) => opt.step(model.keyed_params_mut().chain(set.keyed_params_mut()), lr_multiplier)?,
        None => opt.step(model.keyed_params_mut(), lr_multiplier)?,
    }
    Ok(total)
}

enum Outcome<T> {
    Done(TrainResult<T>),
    Diverged { step: usize, loss: f64 },
}

/// Trains `model` (and `adapters`, if any) on `data.train`, validating on
/// `data.validation()` after every epoch. On return `model` and `adapters`
/// hold the final state; the best epoch's state is in the result.
pub fn train<T: Real>(
    model: &mut QFormer<T>,
    mut adapters: Option<&mut AdapterSet<T>>,
    data: &Dataset,
    config: &RunConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainResult<T>> {
    config.validate()?;
    let (n_img, dim) = (data.spec.n_img, data.spec.image_dim);
    let train_set = prepare::<T>(&data.train, n_img, dim)?;
    let val_set = prepare::<T>(data.validation(), n_img, dim)?;
    if train_set.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }

    let initial = (model.clone(), adapters.as_deref().cloned());
    let lr = config.optimizer.learning_rate;
    match run(model, adapters.as_deref_mut(), &train_set, &val_set, config, lr, observer)? {
        Outcome::Done(r) => Ok(r),
        Outcome::Diverged { step, loss } if config.divergence_retry => {
            let lower = lowered_learning_rate(lr);
            warn!("loss diverged ({loss}) at step {step}; retrying with lr {lower}");
            *model = initial.0;
            if let (Some(set), Some(init)) = (adapters.as_deref_mut(), initial.1) {
                *set = init;
            }
            match run(model, adapters, &train_set, &val_set, config, lower, observer)? {
                Outcome::Done(mut r) => {
                    r.retried = true;
                    Ok(r)
                }
                Outcome::Diverged { step, loss } => Err(Error::Numeric(format!(
                    "loss diverged ({loss}) at step {step} even at lr {lower}"
                ))),
            }
        }
        Outcome::Diverged { step, loss } => Err(Error::Numeric(format!(
            "loss became {loss} at step {step}"
        ))),
    }
}

fn build_allocator<T: Real>(
    set: &AdapterSet<T>,
    cfg: &AllocatorConfig,
    steps_per_epoch: usize,
) -> Result<Option<Allocator>> {
    if set.kind() != AdapterKind::AdaLora {
        return Ok(None);
    }
    let schedule = BudgetSchedule::new(
        svd_active_total(set),
        cfg.r_target * set.len(),
        cfg.warmup_epochs * steps_per_epoch,
        cfg.final_epochs * steps_per_epoch,
    )?;
    let est = SensitivityEstimator::new(set, cfg.beta_sens, cfg.beta_unc, cfg.mode);
    Allocator::new(est, schedule, steps_per_epoch).map(Some)
}

fn run<T: Real>(
    model: &mut QFormer<T>,
    mut adapters: Option<&mut AdapterSet<T>>,
    train_set: &[Example<T>],
    val_set: &[Example<T>],
    config: &RunConfig,
    lr: f64,
    observer: &mut dyn TrainObserver<T>,
) -> Result<Outcome<T>> {
    let effective = config.effective_batch();
    let steps_per_epoch = train_set.len().div_ceil(effective);
    let total_steps = steps_per_epoch * config.max_epochs;
    let schedule = ScheduleConfig {
        kind: config.schedule,
        total_steps,
        warmup_steps: config.warmup_steps.unwrap_or(steps_per_epoch),
    };
    let mut allocator = match adapters.as_deref() {
        Some(set) => build_allocator(set, &config.allocator, steps_per_epoch)?,
        None => None,
    };
    let mut opt = AdamW::new(OptimizerConfig {
        learning_rate: lr,
        ..config.optimizer
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut epochs = Vec::new();
    let mut best = None;
    let mut initial_loss = None;
    let mut step = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let epoch_lr = lr * schedule.lr_multiplier(step);
        let mut loss_sum = 0.0;
        for batch_ids in order.chunks(effective) {
            let batch: Vec<&Example<T>> = batch_ids.iter().map(|&i| &train_set[i]).collect();
            let mult = schedule.lr_multiplier(step);
            let loss = train_step(
                model,
                adapters.as_deref_mut(),
                &mut opt,
                &batch,
                config.batch_size,
                mult,
                config.orth_reg,
            )?;
            step += 1;
            let first = *initial_loss.get_or_insert(loss);
            if loss.is_nan() || loss > 10.0 * first {
                if loss.is_nan() || config.divergence_retry {
                    return Ok(Outcome::Diverged { step, loss });
                }
                warn!("loss {loss} exceeds 10x the initial {first} at step {step}");
            }
            loss_sum += loss * batch.len() as f64;
            if let (Some(alloc), Some(set)) = (allocator.as_mut(), adapters.as_deref_mut()) {
                let out = alloc.step(set, step)?;
                observer.on_allocation(step, &out, set);
            }
            model.zero_grads();
            if let Some(set) = adapters.as_deref_mut() {
                set.zero_grads();
            }
        }

        let val_accuracy = evaluate(model, adapters.as_deref(), val_set)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy,
            lr: epoch_lr,
            active_rank_total: adapters.as_deref().map_or(0, |s| s.total_active_rank()),
        };
        info!(
            "epoch {epoch}: loss {:.6} val_acc {:.4} rank {}",
            metrics.train_loss, metrics.val_accuracy, metrics.active_rank_total
        );
        observer.on_epoch(&metrics);
        epochs.push(metrics);
        let stop = stopper.observe(epoch, val_accuracy);
        if stopper.improved_at(epoch) {
            best = Some(Snapshot {
                model: model.clone(),
                adapters: adapters.as_deref().cloned(),
            });
        }
        if stop {
            break;
        }
    }

    let (best_epoch, best_val_accuracy) = stopper.best().expect("at least one epoch");
    Ok(Outcome::Done(TrainResult {
        epochs,
        best_epoch,
        best_val_accuracy,
        best: best.expect("best epoch recorded"),
        prune_events: allocator.map(|a| a.events).unwrap_or_default(),
        learning_rate: lr,
        retried: false,
        steps: step,
    }))
}
