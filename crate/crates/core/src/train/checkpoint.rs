use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

use super::optim::OptimState;
use super::EpochMetrics;

/// Side-file record stored next to a checkpoint archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer updates completed.
    pub step: u64,
    /// Next `(epoch, step)` whose random streams are drawn.
    pub rng_cursor: (u64, u64),
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub optim: OptimState,
}

pub fn meta_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = self.params.with_prefix("model/");
        store.extend(self.optim.m.with_prefix("optim/m/"));
        store.extend(self.optim.v.with_prefix("optim/v/"));
        WeightArchive::from_store(store)
            .with_meta("optim_step", self.optim.step)
            .with_meta("config_hash", &self.meta.config_hash)
            .write(path)?;
        let side = meta_path(path);
        let json = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    /// Loads a checkpoint; `template` supplies optimizer hyperparameters.
    pub fn load(path: &Path, template: &OptimState) -> Result<Self> {
        let archive = WeightArchive::read(path)?;
        let side = meta_path(path);
        let raw = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&raw)?;
        if archive.meta("config_hash") != Some(meta.config_hash.as_str()) {
            return Err(Error::Format("checkpoint archive and side file disagree".into()));
        }
        let params = archive.entries.strip_prefix("model/");
        let m = archive.entries.strip_prefix("optim/m/");
        let v = archive.entries.strip_prefix("optim/v/");
        if params.is_empty() || m.len() != params.len() || v.len() != params.len() {
            return Err(Error::MissingEntry("checkpoint model or optimizer entries".into()));
        }
        let optim = OptimState {
            hyper: template.hyper,
            lr_peak: template.lr_peak,
            step: archive.meta_parse("optim_step")?,
            m,
            v,
        };
        Ok(Self { meta, params, optim })
    }
}
