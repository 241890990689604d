//! Adapter training, the iterative score-prune-finetune loop and its
//! schedule arithmetic.

mod optim;
mod run;

pub use optim::{adamw_update, lr_at, AdamW, AdamWConfig, Moments, ADAM_EPS};
pub use run::{
    accuracy, run_mimi, run_vanilla, CycleReport, EpochMetrics, MimiRun, RunObserver, VanillaBudget,
    VanillaReport, VanillaRun,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack for comparing σ values that went through floating-point
/// logarithms or repeated division.
const SIGMA_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub sigma0: f64,
    pub sigma_target: f64,
    /// Fraction of the currently live neurons removed at each prune event.
    pub rho: f64,
    pub epochs_per_cycle: usize,
    #[serde(default)]
    pub warmup_epochs: usize,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 >= 1.0 && self.sigma0.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma0 {} must be finite and >= 1", self.sigma0)));
        }
        if !(self.sigma_target >= self.sigma0) {
            return Err(Error::InvalidArgument(format!(
                "sigma_target {} must be >= sigma0 {}",
                self.sigma_target, self.sigma0
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidArgument(format!("rho {} must lie in (0, 1)", self.rho)));
        }
        if self.warmup_epochs > self.epochs_per_cycle {
            return Err(Error::InvalidArgument(format!(
                "warmup_epochs {} exceeds epochs_per_cycle {}",
                self.warmup_epochs, self.epochs_per_cycle
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Record wall-clock seconds in cycle reports. Off keeps reports
    /// reproducible.
    #[serde(default)]
    pub record_time: bool,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr_peak {} must be positive", self.lr_peak)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::InvalidArgument(format!("betas ({b1}, {b2}) must lie in [0, 1)")));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: ADAM_EPS,
            weight_decay: self.weight_decay,
        }
    }
}

/// Closed-form cycle count `ceil((ln σ₀ − ln σ_target) / ln ρ − 1)`,
/// clamped at zero.
pub fn cycle_count_paper(sigma0: f64, sigma_target: f64, rho: f64) -> usize {
    let x = (sigma0.ln() - sigma_target.ln()) / rho.ln() - 1.0;
    let c = (x - SIGMA_TOL).ceil();
    if c > 0.0 {
        c as usize
    } else {
        0
    }
}

/// Number of prune events needed when every event divides the live
/// neuron count by `1/(1−ρ)`, i.e. `σ ← σ/(1−ρ)` until `σ ≥ σ_target`.
pub fn cycle_count_simulated(sigma0: f64, sigma_target: f64, rho: f64) -> usize {
    let mut sigma = sigma0;
    let mut count = 0;
    while !reached(sigma, sigma_target) {
        sigma /= 1.0 - rho;
        count += 1;
    }
    count
}

pub(crate) fn reached(sigma: f64, target: f64) -> bool {
    sigma >= target * (1.0 - SIGMA_TOL)
}
