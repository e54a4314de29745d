//! Pre-training: per-sample masking, frozen-teacher targets, AdamW with a
//! warmup plus cosine schedule, per-epoch metrics and resumable checkpoints.

mod checkpoint;
mod optim;
mod schedule;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{augment_key, AugmentConfig, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::loss::{sample_loss, LossKind, SupervisionFlags};
use crate::masking::{sample_mask, target_mask_count, MaskSpec, SamplerKind};
use crate::model::{forward_sample, ModelBundle, ModelConfig, ModelSize};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::patching::{patchify, sincos_pos_embed, ImageBatch, PatchGrid};
use crate::rng::{self, Purpose};
use crate::teacher::{Teacher, TargetCache, TeacherKind};

pub use checkpoint::{meta_path, Checkpoint, CheckpointMeta};
pub use optim::{adamw_step, decays, AdamWConfig, OptimState};
pub use schedule::Schedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelSize,
    pub patch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to a tenth of `epochs`.
    pub warmup_epochs: Option<usize>,
    /// Defaults to `1.5e-3 · batch_size / 256`.
    pub lr_peak: Option<f64>,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub flags: SupervisionFlags,
    pub loss: LossKind,
    pub sampler: SamplerKind,
    pub gamma: f64,
    pub seed: u64,
    pub teacher: TeacherKind,
    pub normalize_targets: bool,
    pub augment: AugmentConfig,
    /// Write a checkpoint every this many epochs; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSize::Micro,
            patch: 4,
            epochs: 20,
            batch_size: 32,
            warmup_epochs: None,
            lr_peak: None,
            lr_min: 1e-6,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            flags: SupervisionFlags::BOTH,
            loss: LossKind::Cosine,
            sampler: SamplerKind::Blockwise,
            gamma: 0.5,
            seed: 0,
            teacher: TeacherKind::default(),
            normalize_targets: true,
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs / 10)
    }

    pub fn peak_lr(&self) -> f64 {
        self.lr_peak.unwrap_or(1.5e-3 * self.batch_size as f64 / 256.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.warmup() >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup(), self.epochs));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.peak_lr()) {
            return bad(format!("need 0 <= lr_min {} <= lr_peak {}", self.lr_min, self.peak_lr()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn model_config(&self, target_dim: usize) -> ModelConfig {
        ModelConfig::preset(self.model, self.patch, target_dim)
    }
}

/// Controls that do not change the result of a run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where `metrics.csv` and `checkpoint.caet` go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    /// Checkpoint and return once this many epochs are complete.
    pub stop_after_epoch: Option<usize>,
    /// Worker threads for per-sample work; 0 or 1 runs on the caller.
    pub threads: usize,
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub gamma: f64,
    pub delta_v: u8,
    pub delta_m: u8,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub bundle: ModelBundle,
    pub optim: OptimState,
    pub metrics: Vec<EpochMetrics>,
    pub epochs_completed: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl PretrainOutput {
    pub fn final_loss(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.loss)
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.caet";

/// Hash binding a checkpoint to its config, dataset and teacher.
pub fn config_hash(cfg: &TrainConfig, dataset: &Dataset, teacher: &Teacher) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    h.update(dataset.id.as_bytes());
    h.update([0]);
    h.update(teacher.id.as_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Mask for sample `index` of `epoch`.
pub fn mask_for(cfg: &TrainConfig, grid: PatchGrid, epoch: usize, index: usize) -> Result<MaskSpec> {
    let count = target_mask_count(grid.num_patches(), cfg.gamma)?;
    let mut r = rng::stream(cfg.seed, Purpose::Mask, epoch as u64, index as u64);
    sample_mask(cfg.sampler, grid, count, &mut r)
}

/// Sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch as u64, 0));
    order
}

struct SampleStep {
    loss: f64,
    gamma: f64,
    grads: ParamStore<f32>,
}

struct Ctx<'a> {
    cfg: &'a TrainConfig,
    model: ModelConfig,
    grid: PatchGrid,
    pos: Tensor<f32>,
    norm: Normalization,
}

impl Ctx<'_> {
    fn sample_step(&self, params: &ParamStore<f32>, epoch: usize, index: usize, view: &Tensor<f32>, targets: &Tensor<f32>) -> Result<SampleStep> {
        let mask = mask_for(self.cfg, self.grid, epoch, index)?;
        let patches = patchify(&ImageBatch::from_images(std::slice::from_ref(view))?, self.model.patch)?.index_outer(0)?;
        let mut g = Graph::new();
        g.register(params)?;
        let flags = self.cfg.flags;
        let out = forward_sample(&mut g, &self.model, &patches, &self.pos, &mask, flags.masked())?;
        let visible = if flags.visible() {
            let t = g.input(targets.gather_rows(&mask.visible)?);
            Some((out.visible, t))
        } else {
            None
        };
        let masked = match out.masked {
            Some(y) => {
                let t = g.input(targets.gather_rows(&mask.masked)?);
                Some((y, t))
            }
            None => None,
        };
        let loss = sample_loss(&mut g, visible, masked, flags, self.cfg.loss)?;
        let grads = g.backward(loss)?.into_store();
        Ok(SampleStep {
            loss: g.value(loss).item() as f64,
            gamma: mask.gamma(),
            grads,
        })
    }
}

/// Runs (or resumes) pre-training.
///
/// Every random draw comes from a stream keyed by `(seed, purpose, epoch,
/// sample)` and per-sample gradients are summed in batch order, so the
/// result does not depend on `opts.threads`.
pub fn pretrain(cfg: &TrainConfig, dataset: &Dataset, teacher: &Teacher, opts: &RunOptions) -> Result<PretrainOutput> {
    cfg.validate()?;
    if teacher.patch != cfg.patch {
        return Err(Error::InvalidArgument(format!(
            "teacher patch {} differs from student patch {}",
            teacher.patch, cfg.patch
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let model = cfg.model_config(teacher.dim());
    let grid = PatchGrid::for_image(dataset.height, dataset.width, cfg.patch)?;
    let ctx = Ctx {
        cfg,
        model,
        grid,
        pos: sincos_pos_embed(grid.h, grid.w, model.encoder.dim)?,
        norm: dataset.channel_stats(),
    };
    let hash = config_hash(cfg, dataset, teacher)?;
    let mut bundle = ModelBundle::init(model, cfg.seed)?;
    let mut optim = OptimState::new(&bundle.params, cfg.adamw(), cfg.peak_lr());
    let mut metrics = Vec::new();
    let mut start = 0;
    if let Some(path) = &opts.resume_from {
        let ck = Checkpoint::load(path, &optim)?;
        if ck.meta.config_hash != hash {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {} was written for a different config",
                path.display()
            )));
        }
        bundle.params = ck.params;
        bundle.validate()?;
        optim = ck.optim;
        metrics = ck.meta.metrics;
        start = ck.meta.epoch;
    }

    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = Schedule {
        warmup_steps: (cfg.warmup() * steps_per_epoch) as u64,
        total_steps: (cfg.epochs * steps_per_epoch) as u64,
        peak: cfg.peak_lr(),
        min: cfg.lr_min,
    };
    let pool = if opts.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.threads)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut cache = TargetCache::new();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut completed = start;
    for epoch in start..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, n);
        let aug_key = augment_key(cfg.seed, epoch as u64, &cfg.augment);
        let (mut loss_sum, mut gamma_sum, mut lr) = (0.0f64, 0.0f64, 0.0f64);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = optim.step;
            let mut inputs = Vec::with_capacity(batch.len());
            for &i in batch {
                let view = dataset.view(i, &cfg.augment, aug_key, &ctx.norm)?;
                let targets = if aug_key == 0 {
                    cache.get_or_compute(&dataset.id, i, aug_key, || teacher.features(&view))?
                } else {
                    teacher.features(&view)?
                };
                inputs.push((i, view, targets));
            }
            let run = |(i, view, targets): &(usize, Tensor<f32>, Tensor<f32>)| {
                ctx.sample_step(&bundle.params, epoch, *i, view, targets)
            };
            let results: Vec<Result<SampleStep>> = match &pool {
                Some(p) => p.install(|| inputs.par_iter().map(run).collect()),
                None => inputs.iter().map(run).collect(),
            };
            let diag = |samples: &[usize]| Error::NonFiniteLoss {
                epoch,
                step,
                batch_seed: rng::stream_key(cfg.seed, Purpose::Shuffle, epoch as u64, b as u64),
                samples: samples.to_vec(),
            };
            let mut steps = Vec::with_capacity(results.len());
            for r in results {
                match r {
                    Ok(s) if s.loss.is_finite() => steps.push(s),
                    Ok(_) | Err(Error::NonFinite { .. }) => return Err(diag(batch)),
                    Err(e) => return Err(e),
                }
            }
            let inv = 1.0 / steps.len() as f32;
            let mut grads = steps[0].grads.clone();
            for s in &steps[1..] {
                for (name, g) in grads.iter_mut() {
                    let other = s.grads.get(name)?;
                    g.data_mut().iter_mut().zip(other.data()).for_each(|(a, b)| *a += b);
                }
            }
            for (_, g) in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            if grads.iter().any(|(_, g)| !g.all_finite()) {
                return Err(diag(batch));
            }
            let batch_loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64;
            lr = schedule.lr_at(step as f64);
            adamw_step(&mut bundle.params, &grads, &mut optim, lr)?;
            loss_sum += batch_loss;
            gamma_sum += steps.iter().map(|s| s.gamma).sum::<f64>();
        }
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            step: optim.step,
            loss: loss_sum / steps_per_epoch as f64,
            lr,
            gamma: gamma_sum / n as f64,
            delta_v: cfg.flags.delta_v(),
            delta_m: cfg.flags.delta_m(),
            seed: cfg.seed,
        });
        completed = epoch + 1;
        let stopping = opts.stop_after_epoch == Some(completed);
        let last = completed == cfg.epochs;
        let periodic = cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0;
        if let Some(dir) = &opts.out_dir {
            write_metrics(&dir.join(METRICS_FILE), &metrics)?;
            if stopping || last || periodic {
                Checkpoint {
                    meta: CheckpointMeta {
                        config_hash: hash.clone(),
                        epoch: completed,
                        step: optim.step,
                        rng_cursor: (completed as u64, optim.step),
                        metrics: metrics.clone(),
                    },
                    params: bundle.params.clone(),
                    optim: optim.clone(),
                }
                .save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        if stopping {
            break;
        }
    }
    Ok(PretrainOutput {
        bundle,
        optim,
        metrics,
        epochs_completed: completed,
        cache_hits: cache.hits,
        cache_misses: cache.misses,
    })
}
