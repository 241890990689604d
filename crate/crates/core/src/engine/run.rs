use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{lr_at, AdamW};
use super::{cycle_count_paper, cycle_count_simulated, reached, PruneSchedule, TrainConfig};
use crate::adapter::compression_state;
use crate::autodiff::Tape;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scoring::{select, ScorerKind, SelectionMode};
use crate::vit::{GradMode, Model, ParamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub cycle: usize,
    /// Epoch index counted over the whole run.
    pub epoch: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    #[serde(with = "crate::floats")]
    pub train_loss: f64,
    /// Accuracy on the training batches as they were seen, before each
    /// update.
    #[serde(with = "crate::floats")]
    pub train_acc: f64,
    #[serde(with = "crate::floats")]
    pub val_acc: f64,
}

/// One prune event plus the finetuning after it. Cycle 0 is the initial
/// training and prunes nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    #[serde(with = "crate::floats")]
    pub sigma_before: f64,
    #[serde(with = "crate::floats")]
    pub sigma_after: f64,
    /// `(slot, N_i)` of every injected adapter.
    pub hidden_before: Vec<(usize, usize)>,
    pub hidden_after: Vec<(usize, usize)>,
    pub removed: usize,
    #[serde(with = "crate::floats")]
    pub train_acc: f64,
    #[serde(with = "crate::floats")]
    pub val_acc: f64,
    #[serde(with = "crate::floats")]
    pub test_acc: f64,
    pub trainable_params: usize,
    /// Zero unless `TrainConfig::record_time` is set.
    pub wall_clock_secs: f64,
    pub cycles_paper: usize,
    pub cycles_simulated: usize,
}

/// Callbacks invoked while a run progresses. Errors abort the run.
pub trait RunObserver<T> {
    fn on_epoch(&mut self, _metrics: &EpochMetrics) -> Result<()> {
        Ok(())
    }

    fn on_cycle(&mut self, _model: &Model<T>, _report: &CycleReport) -> Result<()> {
        Ok(())
    }
}

impl<T> RunObserver<T> for () {}

#[derive(Debug, Clone)]
pub struct MimiRun<T> {
    pub model: Model<T>,
    pub cycles: Vec<CycleReport>,
    pub epochs: Vec<EpochMetrics>,
    /// Set when a prune event removed nothing (for example local selection
    /// with single-neuron adapters) and the target could not be reached.
    pub stalled: bool,
}

/// Epoch budget of a plain adapter run. The learning-rate schedule restarts
/// every `epochs_per_cycle` epochs, like the pruning loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VanillaBudget {
    pub total_epochs: usize,
    pub epochs_per_cycle: usize,
    pub warmup_epochs: usize,
}

impl VanillaBudget {
    /// The budget a pruning run with `schedule` spends: one initial phase
    /// plus one finetuning phase per prune event.
    pub fn matching(schedule: &PruneSchedule) -> Self {
        let cycles = cycle_count_simulated(schedule.sigma0, schedule.sigma_target, schedule.rho);
        Self {
            total_epochs: schedule.epochs_per_cycle * (cycles + 1),
            epochs_per_cycle: schedule.epochs_per_cycle,
            warmup_epochs: schedule.warmup_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanillaReport {
    #[serde(with = "crate::floats")]
    pub sigma: f64,
    #[serde(with = "crate::floats")]
    pub train_acc: f64,
    #[serde(with = "crate::floats")]
    pub val_acc: f64,
    #[serde(with = "crate::floats")]
    pub test_acc: f64,
    pub trainable_params: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct VanillaRun<T> {
    pub model: Model<T>,
    pub report: VanillaReport,
    pub epochs: Vec<EpochMetrics>,
}

/// Fraction of correct argmax predictions; ties go to the lower class.
/// An empty split yields NaN.
pub fn accuracy<T: Scalar>(model: &Model<T>, split: &Split, batch_size: usize) -> Result<f64> {
    if split.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for b in split.batches::<T>(batch_size, None) {
        let mut tape = Tape::new();
        let trace = model.forward_tape(&mut tape, &b.images, b.len(), GradMode::None)?;
        correct += count_correct(tape.value(trace.logits), &b.labels);
    }
    Ok(correct as f64 / split.len() as f64)
}

fn count_correct<T: Scalar>(logits: &[T], labels: &[usize]) -> usize {
    let classes = logits.len() / labels.len().max(1);
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits[i * classes..(i + 1) * classes];
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == l
        })
        .count()
}

struct Trainer<'a, T> {
    config: &'a TrainConfig,
    dataset: &'a Dataset,
    opt: AdamW,
    rng: ChaCha8Rng,
    epoch: usize,
    log: Vec<EpochMetrics>,
    observer: &'a mut dyn RunObserver<T>,
}

struct PhaseResult {
    train_acc: f64,
    val_acc: f64,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    fn new(config: &'a TrainConfig, dataset: &'a Dataset, observer: &'a mut dyn RunObserver<T>) -> Result<Self> {
        config.validate()?;
        if dataset.train.is_empty() {
            return Err(Error::EmptyDataset("training split has no samples".into()));
        }
        Ok(Self {
            config,
            dataset,
            opt: AdamW::new(config.adamw()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            epoch: 0,
            log: Vec::new(),
            observer,
        })
    }

    /// Trains for `epochs` with a fresh warmup + cosine schedule. The
    /// schedule is evaluated one step ahead so neither the first nor the
    /// last step has a zero learning rate.
    fn phase(&mut self, model: &mut Model<T>, cycle: usize, epochs: usize, warmup_epochs: usize) -> Result<PhaseResult> {
        let n = self.dataset.train.len();
        let bs = self.config.batch_size;
        let per_epoch = n.div_ceil(bs);
        let total = epochs * per_epoch;
        let warmup = warmup_epochs * per_epoch;
        let mut step = 0;
        let mut last_train_acc = f64::NAN;
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.rng);
            let mut loss_sum = 0.0;
            let mut correct = 0;
            let mut lr = 0.0;
            for b in self.dataset.train.batches::<T>(bs, Some(&order)) {
                let mut tape = Tape::new();
                let trace = model.forward_tape(&mut tape, &b.images, b.len(), GradMode::Trainable)?;
                correct += count_correct(tape.value(trace.logits), &b.labels);
                let loss = tape.cross_entropy(trace.logits, &b.labels)?;
                loss_sum += tape.value(loss)[0].as_f64() * b.len() as f64;
                let grads = tape.backward(loss)?;
                let updates: Vec<(ParamId, Vec<T>)> = trace
                    .params
                    .iter()
                    .filter(|(id, _)| !matches!(id, ParamId::Backbone(_)))
                    .filter_map(|&(id, v)| grads.get(v).map(|g| (id, g.to_vec())))
                    .collect();
                lr = lr_at(step + 1, total + 1, warmup, self.config.lr_peak);
                self.opt.step(model, &updates, lr)?;
                step += 1;
            }
            last_train_acc = correct as f64 / n as f64;
            let m = EpochMetrics {
                cycle,
                epoch: self.epoch,
                lr,
                train_loss: loss_sum / n as f64,
                train_acc: last_train_acc,
                val_acc: accuracy(model, &self.dataset.val, bs)?,
            };
            self.observer.on_epoch(&m)?;
            self.log.push(m);
            self.epoch += 1;
        }
        let val_acc = match self.log.last() {
            Some(m) if epochs > 0 => m.val_acc,
            _ => accuracy(model, &self.dataset.val, bs)?,
        };
        if epochs == 0 {
            last_train_acc = accuracy(model, &self.dataset.train, bs)?;
        }
        Ok(PhaseResult {
            train_acc: last_train_acc,
            val_acc,
        })
    }
}

fn hidden_sizes<T: Scalar>(model: &Model<T>) -> Vec<(usize, usize)> {
    model.adapters().iter().map(|(s, a)| (*s, a.hidden())).collect()
}

fn seconds(start: &Instant, enabled: bool) -> f64 {
    if enabled {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

/// Trains the injected adapters and head, then repeatedly scores, removes
/// `ρ` of the live neurons and finetunes until the global compression
/// reaches `σ_target`.
pub fn run_mimi<T: Scalar>(
    mut model: Model<T>,
    schedule: &PruneSchedule,
    config: &TrainConfig,
    dataset: &Dataset,
    scorer: ScorerKind,
    mode: SelectionMode,
    observer: &mut dyn RunObserver<T>,
) -> Result<MimiRun<T>> {
    schedule.validate()?;
    if model.adapters().is_empty() {
        return Err(Error::InvalidArgument("run_mimi needs injected adapters".into()));
    }
    let cycles_paper = cycle_count_paper(schedule.sigma0, schedule.sigma_target, schedule.rho);
    let cycles_simulated = cycle_count_simulated(schedule.sigma0, schedule.sigma_target, schedule.rho);
    let timed = config.record_time;
    let bs = config.batch_size;
    let mut trainer = Trainer::new(config, dataset, observer)?;
    let mut reports = Vec::new();
    let mut stalled = false;

    let start = Instant::now();
    let sigma = compression_state(&model).global;
    let hidden = hidden_sizes(&model);
    let phase = trainer.phase(&mut model, 0, schedule.epochs_per_cycle, schedule.warmup_epochs)?;
    let report = CycleReport {
        cycle: 0,
        sigma_before: sigma,
        sigma_after: sigma,
        hidden_before: hidden.clone(),
        hidden_after: hidden,
        removed: 0,
        train_acc: phase.train_acc,
        val_acc: phase.val_acc,
        test_acc: accuracy(&model, &dataset.test, bs)?,
        trainable_params: model.trainable_param_count(),
        wall_clock_secs: seconds(&start, timed),
        cycles_paper,
        cycles_simulated,
    };
    trainer.observer.on_cycle(&model, &report)?;
    reports.push(report);

    let score_batches = dataset.train.batches::<T>(bs, None);
    let mut cycle = 1;
    while !reached(compression_state(&model).global, schedule.sigma_target) {
        let start = Instant::now();
        let sigma_before = compression_state(&model).global;
        let hidden_before = hidden_sizes(&model);
        let seed = config.seed ^ (cycle as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let table = scorer.score(&model, &score_batches, seed)?;
        let plan = select(&table, schedule.rho, mode)?;
        if plan.removed == 0 {
            stalled = true;
            break;
        }
        for (&slot, keep) in &plan.keep {
            let Some(a) = model.adapter(slot) else { continue };
            if keep.len() == a.hidden() {
                continue;
            }
            let (n, m) = (a.hidden(), a.input_dim());
            let pruned = a.prune(keep)?;
            model.set_adapter(slot, Some(pruned))?;
            trainer.opt.prune_adapter(slot, n, m, keep);
        }
        let phase = trainer.phase(&mut model, cycle, schedule.epochs_per_cycle, schedule.warmup_epochs)?;
        let report = CycleReport {
            cycle,
            sigma_before,
            sigma_after: compression_state(&model).global,
            hidden_before,
            hidden_after: hidden_sizes(&model),
            removed: plan.removed,
            train_acc: phase.train_acc,
            val_acc: phase.val_acc,
            test_acc: accuracy(&model, &dataset.test, bs)?,
            trainable_params: model.trainable_param_count(),
            wall_clock_secs: seconds(&start, timed),
            cycles_paper,
            cycles_simulated,
        };
        trainer.observer.on_cycle(&model, &report)?;
        reports.push(report);
        cycle += 1;
    }
    let epochs = std::mem::take(&mut trainer.log);
    Ok(MimiRun {
        model,
        cycles: reports,
        epochs,
        stalled,
    })
}

/// Plain training of whatever adapters are injected, plus the head.
pub fn run_vanilla<T: Scalar>(
    mut model: Model<T>,
    config: &TrainConfig,
    dataset: &Dataset,
    budget: &VanillaBudget,
    observer: &mut dyn RunObserver<T>,
) -> Result<VanillaRun<T>> {
    if budget.warmup_epochs > budget.epochs_per_cycle.max(budget.total_epochs) {
        return Err(Error::InvalidArgument("warmup exceeds the cycle length".into()));
    }
    let bs = config.batch_size;
    let mut trainer = Trainer::new(config, dataset, observer)?;
    let mut remaining = budget.total_epochs;
    let mut cycle = 0;
    let mut last = None;
    while remaining > 0 {
        let len = if budget.epochs_per_cycle == 0 {
            remaining
        } else {
            budget.epochs_per_cycle.min(remaining)
        };
        last = Some(trainer.phase(&mut model, cycle, len, budget.warmup_epochs.min(len))?);
        remaining -= len;
        cycle += 1;
    }
    let phase = match last {
        Some(p) => p,
        None => trainer.phase(&mut model, 0, 0, 0)?,
    };
    let report = VanillaReport {
        sigma: compression_state(&model).global,
        train_acc: phase.train_acc,
        val_acc: phase.val_acc,
        test_acc: accuracy(&model, &dataset.test, bs)?,
        trainable_params: model.trainable_param_count(),
        epochs: budget.total_epochs,
    };
    let epochs = std::mem::take(&mut trainer.log);
    Ok(VanillaRun { model, report, epochs })
}
