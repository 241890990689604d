//! End-to-end training runs driven by a [`RunConfig`], writing CSV reports
//! and per-cycle checkpoints to an output directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::adapter::{compression_state, inject_adapters};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::cost::{allocation_report, cost_report, write_allocation_csv, write_cost_csv};
use crate::engine::{
    cycle_count_paper, cycle_count_simulated, run_mimi, run_vanilla, CycleReport, EpochMetrics, Precision,
    RunObserver, VanillaBudget,
};
use crate::error::{Error, Result};
use crate::report::{write_cycles_csv, write_metrics_csv};
use crate::scalar::Scalar;
use crate::scoring::{ScorerKind, SelectionMode};
use crate::vit::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mimi,
    Vanilla,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub mode: Mode,
    pub scorer: ScorerKind,
    pub selection: SelectionMode,
    /// Overrides `train.seed` from the config.
    pub seed: Option<u64>,
    /// Write straight into `output_dir` and leave wall-clock fields at zero.
    pub reproducible: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Mimi,
            scorer: ScorerKind::Mimi,
            selection: SelectionMode::Global,
            seed: None,
            reproducible: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub cycles: Vec<CycleReport>,
    pub epochs: Vec<EpochMetrics>,
}

/// True when the `REPRODUCIBLE` environment variable is `1`.
pub fn reproducible_from_env() -> bool {
    std::env::var("REPRODUCIBLE").is_ok_and(|v| v == "1")
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    File::create(&path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

struct CheckpointWriter {
    dir: PathBuf,
    history: Vec<CycleReport>,
}

impl<T: Scalar> RunObserver<T> for CheckpointWriter {
    fn on_cycle(&mut self, model: &Model<T>, report: &CycleReport) -> Result<()> {
        self.history.push(report.clone());
        let dir = self.dir.join(format!("cycle-{:02}", report.cycle));
        save_checkpoint(model, &self.history, &dir)
    }
}

/// Runs training as configured and writes `metrics.csv`, `cycles.csv`,
/// `allocation.csv`, `cost.csv` and `checkpoints/cycle-NN/`.
pub fn train(config: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let mut config = config.clone();
    if let Some(s) = opts.seed {
        config.train.seed = s;
    }
    config.train.record_time = !opts.reproducible;
    let out = if opts.reproducible {
        config.output_dir.clone()
    } else {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        config.output_dir.join(format!("run-{stamp}"))
    };
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    match config.train.precision {
        Precision::F32 => train_typed::<f32>(&config, opts, &out),
        Precision::F64 => train_typed::<f64>(&config, opts, &out),
    }
}

fn train_typed<T: Scalar>(config: &RunConfig, opts: &TrainOptions, out: &Path) -> Result<TrainOutcome> {
    let dataset = config.dataset.load()?;
    if dataset.num_classes != config.model.num_classes || dataset.image_side != config.model.image_side {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes of {}px images, model expects {} of {}px",
            dataset.num_classes, dataset.image_side, config.model.num_classes, config.model.image_side
        )));
    }
    let mut model = Model::<T>::build(&config.model, config.backbone_seed)?;
    inject_adapters(&mut model, &config.adapters, config.train.seed)?;
    let mut writer = CheckpointWriter {
        dir: out.join("checkpoints"),
        history: Vec::new(),
    };
    let (model, cycles, epochs) = match opts.mode {
        Mode::Mimi => {
            let run = run_mimi(
                model,
                &config.schedule,
                &config.train,
                &dataset,
                opts.scorer,
                opts.selection,
                &mut writer,
            )?;
            (run.model, run.cycles, run.epochs)
        }
        Mode::Vanilla => {
            let budget = VanillaBudget::matching(&config.schedule);
            let sigma = compression_state(&model).global;
            let hidden: Vec<(usize, usize)> = model.adapters().iter().map(|(s, a)| (*s, a.hidden())).collect();
            let start = std::time::Instant::now();
            let run = run_vanilla(model, &config.train, &dataset, &budget, &mut ())?;
            let s = &config.schedule;
            let report = CycleReport {
                cycle: 0,
                sigma_before: sigma,
                sigma_after: sigma,
                hidden_before: hidden.clone(),
                hidden_after: hidden,
                removed: 0,
                train_acc: run.report.train_acc,
                val_acc: run.report.val_acc,
                test_acc: run.report.test_acc,
                trainable_params: run.report.trainable_params,
                wall_clock_secs: if config.train.record_time {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                },
                cycles_paper: cycle_count_paper(s.sigma0, s.sigma_target, s.rho),
                cycles_simulated: cycle_count_simulated(s.sigma0, s.sigma_target, s.rho),
            };
            RunObserver::<T>::on_cycle(&mut writer, &run.model, &report)?;
            (run.model, vec![report], run.epochs)
        }
    };
    write_metrics_csv(&epochs, create(out.join("metrics.csv"))?)?;
    write_cycles_csv(&cycles, create(out.join("cycles.csv"))?)?;
    write_allocation_csv(&allocation_report(&model), create(out.join("allocation.csv"))?)?;
    let cost = cost_report(&model, None);
    write_cost_csv(
        &[("adapters", &cost), ("full_finetuning", &cost.full_finetuning())],
        create(out.join("cost.csv"))?,
    )?;
    Ok(TrainOutcome {
        output_dir: out.to_path_buf(),
        cycles,
        epochs,
    })
}
