//! JSON lab configuration read by the command-line tool.
//!
//! Every section is optional and falls back to its defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::harness::{FinetuneConfig, ProbeConfig, SweepPlan};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// CIFAR-10 binary batch file.
    Cifar { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(cfg) => Dataset::synthetic(cfg),
            DataSource::Cifar { path } => Dataset::read_cifar(path),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub sweep: SweepPlan,
}

impl LabConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Overrides every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.probe.seed = seed;
        self.finetune.seed = seed;
        self
    }
}
