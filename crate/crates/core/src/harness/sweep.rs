use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{LossKind, SupervisionFlags};
use crate::masking::SamplerKind;
use crate::model::ModelSize;
use crate::teacher::Teacher;
use crate::train::{pretrain, RunOptions, TrainConfig};

use super::probe::{linear_probe, ProbeConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepPlan {
    pub models: Vec<ModelSize>,
    pub gammas: Vec<f64>,
    pub flags: Vec<SupervisionFlags>,
    pub losses: Vec<LossKind>,
    pub samplers: Vec<SamplerKind>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Cells run concurrently; rows are still written in plan order.
    pub parallel: usize,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            models: vec![ModelSize::Micro],
            gammas: vec![0.15, 0.5, 0.9],
            flags: vec![SupervisionFlags::BOTH],
            losses: vec![LossKind::Cosine],
            samplers: vec![SamplerKind::Blockwise],
            seeds: vec![0],
            epochs: 20,
            parallel: 1,
        }
    }
}

/// One fully specified sweep cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub model: ModelSize,
    pub gamma: f64,
    pub flags: SupervisionFlags,
    pub loss: LossKind,
    pub sampler: SamplerKind,
    pub seed: u64,
}

type Key = (ModelSize, u64, u8, u8, LossKind, SamplerKind, u64);

impl Cell {
    fn key(&self) -> Key {
        (
            self.model,
            self.gamma.to_bits(),
            self.flags.delta_v(),
            self.flags.delta_m(),
            self.loss,
            self.sampler,
            self.seed,
        )
    }

    pub fn slug(&self) -> String {
        format!(
            "{}-g{}-v{}m{}-{}-{}-s{}",
            self.model,
            self.gamma,
            self.flags.delta_v(),
            self.flags.delta_m(),
            self.loss,
            self.sampler,
            self.seed
        )
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty()
            || self.gammas.is_empty()
            || self.flags.is_empty()
            || self.losses.is_empty()
            || self.samplers.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::InvalidArgument("every sweep list needs at least one entry".into()));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::InvalidArgument(format!("sweep gamma {g} outside [0, 1]")));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("sweep epochs must be positive".into()));
        }
        Ok(())
    }

    /// Cells in plan order: models, gammas, flags, losses, samplers, seeds,
    /// with the last list varying fastest.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &model in &self.models {
            for &gamma in &self.gammas {
                for &flags in &self.flags {
                    for &loss in &self.losses {
                        for &sampler in &self.samplers {
                            for &seed in &self.seeds {
                                out.push(Cell { model, gamma, flags, loss, sampler, seed });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// A results row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: ModelSize,
    pub gamma: f64,
    pub delta_v: u8,
    pub delta_m: u8,
    pub loss_kind: LossKind,
    pub sampler: SamplerKind,
    pub seed: u64,
    pub final_pretrain_loss: f64,
    pub probe_acc: f64,
    /// `ok`, or `error:<tag>` for a failed cell.
    pub status: String,
}

impl SweepRow {
    fn key(&self) -> Key {
        (
            self.model,
            self.gamma.to_bits(),
            self.delta_v,
            self.delta_m,
            self.loss_kind,
            self.sampler,
            self.seed,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub written: usize,
    pub skipped: usize,
    pub failed: usize,
}

pub const SWEEP_FILE: &str = "sweep.csv";

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn error_tag(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => "non_finite",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Graph(_) => "graph",
        Error::MissingParam(_) | Error::MissingEntry(_) => "missing",
        Error::Format(_) => "format",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

/// Pretrains then probes one cell; `base` supplies every setting the plan
/// does not vary.
pub fn run_cell(
    cell: &Cell,
    plan: &SweepPlan,
    base: &TrainConfig,
    probe: &ProbeConfig,
    dataset: &Dataset,
    cell_dir: Option<PathBuf>,
) -> Result<(f64, f64)> {
    let cfg = TrainConfig {
        model: cell.model,
        gamma: cell.gamma,
        flags: cell.flags,
        loss: cell.loss,
        sampler: cell.sampler,
        seed: cell.seed,
        epochs: plan.epochs,
        warmup_epochs: base.warmup_epochs.map(|w| w.min(plan.epochs - 1)),
        ..base.clone()
    };
    let teacher = Teacher::build(&cfg.teacher, cfg.patch, cfg.normalize_targets)?;
    let opts = RunOptions {
        out_dir: cell_dir,
        ..Default::default()
    };
    let out = pretrain(&cfg, dataset, &teacher, &opts)?;
    let report = linear_probe(&out.bundle, dataset, probe)?;
    Ok((out.final_loss(), report.accuracy))
}

/// Runs every cell whose key is not already in `out_dir/sweep.csv` and
/// appends one row per cell. Failed cells get NaN metrics and an error tag.
pub fn run_sweep(
    plan: &SweepPlan,
    base: &TrainConfig,
    probe: &ProbeConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<SweepReport> {
    plan.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(SWEEP_FILE);
    let done: HashSet<Key> = if path.exists() {
        read_sweep(&path)?.iter().map(SweepRow::key).collect()
    } else {
        HashSet::new()
    };
    let cells = plan.cells();
    let todo: Vec<Cell> = cells.iter().copied().filter(|c| !done.contains(&c.key())).collect();
    let mut report = SweepReport {
        skipped: cells.len() - todo.len(),
        ..Default::default()
    };
    let run = |c: &Cell| -> SweepRow {
        let dir = out_dir.join("cells").join(c.slug());
        let (loss, acc, status) = match run_cell(c, plan, base, probe, dataset, Some(dir)) {
            Ok((l, a)) => (l, a, "ok".to_string()),
            Err(e) => (f64::NAN, f64::NAN, format!("error:{}", error_tag(&e))),
        };
        SweepRow {
            model: c.model,
            gamma: c.gamma,
            delta_v: c.flags.delta_v(),
            delta_m: c.flags.delta_m(),
            loss_kind: c.loss,
            sampler: c.sampler,
            seed: c.seed,
            final_pretrain_loss: loss,
            probe_acc: acc,
            status,
        }
    };
    let chunk = plan.parallel.max(1);
    for group in todo.chunks(chunk) {
        let rows: Vec<SweepRow> = if chunk > 1 {
            group.par_iter().map(run).collect()
        } else {
            group.iter().map(run).collect()
        };
        for row in rows {
            if row.status != "ok" {
                report.failed += 1;
            }
            append_row(&path, &row)?;
            report.written += 1;
        }
    }
    if !path.exists() {
        append_row_header_only(&path)?;
    }
    Ok(report)
}

fn encode_row(row: &SweepRow, header: bool) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(Vec::new());
    w.serialize(row)?;
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Appends one row with a single write; the header goes first in a new file.
fn append_row(path: &Path, row: &SweepRow) -> Result<()> {
    let fresh = !path.exists();
    let bytes = encode_row(row, fresh)?;
    let mut f = open_append(path)?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn append_row_header_only(path: &Path) -> Result<()> {
    let mut bytes = encode_row(
        &SweepRow {
            model: ModelSize::Micro,
            gamma: 0.0,
            delta_v: 1,
            delta_m: 0,
            loss_kind: LossKind::Cosine,
            sampler: SamplerKind::Random,
            seed: 0,
            final_pretrain_loss: 0.0,
            probe_acc: 0.0,
            status: String::new(),
        },
        true,
    )?;
    let header_end = bytes.iter().position(|&b| b == b'\n').map_or(bytes.len(), |p| p + 1);
    bytes.truncate(header_end);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn open_append(path: &Path) -> Result<std::fs::File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}
