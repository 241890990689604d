//! The JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterPlan;
use crate::data::DatasetSpec;
use crate::engine::{PruneSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::vit::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    /// Seed of the frozen backbone.
    #[serde(default)]
    pub backbone_seed: u64,
    pub adapters: AdapterPlan,
    pub schedule: PruneSchedule,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        // Relative paths inside the config are relative to the config file.
        if let Some(base) = path.parent() {
            if cfg.output_dir.is_relative() {
                cfg.output_dir = base.join(&cfg.output_dir);
            }
            if let DatasetSpec::Csv { path: p, .. } = &mut cfg.dataset {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.train.validate()
    }
}
