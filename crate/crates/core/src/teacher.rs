//! Frozen target provider: per-patch teacher features of the intact view,
//! split by absolute patch position, plus on-disk target caching.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::archive::WeightArchive;
use crate::data::{AugmentConfig, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::model::{embed_visible, encoder_block, EncoderConfig, ModelSize};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::patching::{patchify, sincos_pos_embed, ImageBatch, PatchGrid};
use crate::rng::{self, Purpose};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherKind {
    /// Seeded, randomly initialized ViT encoder.
    PseudoVit { seed: u64, size: ModelSize },
    /// Encoder weights read from a [`WeightArchive`].
    Loaded { path: PathBuf },
}

impl Default for TeacherKind {
    fn default() -> Self {
        TeacherKind::PseudoVit {
            seed: 0,
            size: ModelSize::Micro,
        }
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherKind::PseudoVit { seed, size } => write!(f, "pseudovit:{size}:{seed}"),
            TeacherKind::Loaded { path } => write!(f, "{}", path.display()),
        }
    }
}

impl FromStr for TeacherKind {
    type Err = Error;

    /// `pseudovit[:size[:seed]]`, or any other string as an archive path.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        if parts.next() == Some("pseudovit") {
            let size = parts.next().map(str::parse).transpose()?.unwrap_or(ModelSize::Micro);
            let seed = parts
                .next()
                .map(|v| v.parse().map_err(|_| Error::InvalidArgument(format!("bad teacher seed in `{s}`"))))
                .transpose()?
                .unwrap_or(0);
            return Ok(TeacherKind::PseudoVit { seed, size });
        }
        Ok(TeacherKind::Loaded { path: PathBuf::from(s) })
    }
}

/// A frozen ViT encoder producing `[N, D_t]` features per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub id: String,
    pub encoder: EncoderConfig,
    pub patch: usize,
    /// Number of blocks run; the final LN is applied only after the last one.
    pub layer: usize,
    pub normalize: bool,
    params: ParamStore<f32>,
}

impl Teacher {
    pub fn build(kind: &TeacherKind, patch: usize, normalize: bool) -> Result<Self> {
        match kind {
            TeacherKind::PseudoVit { seed, size } => Self::pseudo_vit(*size, patch, *seed, normalize),
            TeacherKind::Loaded { path } => Self::load(path, normalize),
        }
    }

    pub fn pseudo_vit(size: ModelSize, patch: usize, seed: u64, normalize: bool) -> Result<Self> {
        let encoder = EncoderConfig::preset(size);
        encoder.validate()?;
        if patch == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        let layout = crate::model::encoder_layout("encoder", &encoder, patch * patch * 3);
        let mut params = crate::model::init_layout(layout, rng::stream_key(seed, Purpose::Teacher, 0, 0));
        // Rescale weights to a 1/sqrt(fan_in) spread so the frozen features
        // depend on image content rather than mostly on position.
        for (name, t) in params.iter_mut() {
            if name.ends_with(".weight") {
                let fan_in = t.shape()[0] as f64;
                let k = (1.0 / (fan_in.sqrt() * crate::model::INIT_STD)) as f32;
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        Ok(Self {
            id: format!("pseudovit-{size}-s{seed}-p{patch}"),
            encoder,
            patch,
            layer: encoder.layers,
            normalize,
            params,
        })
    }

    pub fn from_archive(archive: &WeightArchive, id: impl Into<String>, normalize: bool) -> Result<Self> {
        let encoder = EncoderConfig {
            layers: archive.meta_parse("layers")?,
            dim: archive.meta_parse("dim")?,
            heads: archive.meta_parse("heads")?,
            mlp_ratio: archive.meta_parse("mlp_ratio")?,
        };
        encoder.validate()?;
        let patch: usize = archive.meta_parse("patch")?;
        let layer = match archive.meta("layer") {
            Some(_) => archive.meta_parse("layer")?,
            None => encoder.layers,
        };
        if layer == 0 || layer > encoder.layers {
            return Err(Error::Format(format!("teacher layer {layer} outside 1..={}", encoder.layers)));
        }
        let mut params = ParamStore::new();
        for (name, shape, _) in crate::model::encoder_layout("encoder", &encoder, patch * patch * 3) {
            let t = archive.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
            params.insert(name, t.clone());
        }
        for extra in ["encoder.cls_token", "encoder.pos_embed"] {
            if let Ok(t) = archive.get(extra) {
                params.insert(extra, t.clone());
            }
        }
        if let Ok(cls) = params.get("encoder.cls_token") {
            if cls.shape() != [encoder.dim] {
                return Err(Error::Format(format!("cls_token shape {:?}", cls.shape())));
            }
        }
        Ok(Self {
            id: id.into(),
            encoder,
            patch,
            layer,
            normalize,
            params,
        })
    }

    pub fn load(path: &Path, normalize: bool) -> Result<Self> {
        let archive = WeightArchive::read(path)?;
        let id = format!("loaded-{}", path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default());
        Self::from_archive(&archive, id, normalize)
    }

    pub fn to_archive(&self) -> WeightArchive {
        WeightArchive::from_store(self.params.clone())
            .with_meta("layers", self.encoder.layers)
            .with_meta("dim", self.encoder.dim)
            .with_meta("heads", self.encoder.heads)
            .with_meta("mlp_ratio", self.encoder.mlp_ratio)
            .with_meta("patch", self.patch)
            .with_meta("layer", self.layer)
    }

    /// Target width `D_t`.
    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    /// Features of one `[3, H, W]` image, `[N, D_t]`.
    pub fn features(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let batch = ImageBatch::from_images(std::slice::from_ref(img))?;
        let grid = batch.grid(self.patch)?;
        let n = grid.num_patches();
        let d = self.encoder.dim;
        let patches = patchify(&batch, self.patch)?.index_outer(0)?;
        let has_cls = self.params.contains("encoder.cls_token");
        let table = match self.params.get("encoder.pos_embed") {
            Ok(t) => {
                let rows = n + has_cls as usize;
                if t.shape() != [rows, d] {
                    return Err(Error::shape(
                        "teacher_targets",
                        format!("position table {:?} for {n} patches", t.shape()),
                    ));
                }
                t.clone()
            }
            Err(_) => {
                let sc = sincos_pos_embed::<f32>(grid.h, grid.w, d)?;
                if has_cls {
                    let mut rows = vec![0.0f32; d];
                    rows.extend_from_slice(sc.data());
                    Tensor::from_vec(vec![n + 1, d], rows)?
                } else {
                    sc
                }
            }
        };
        let skip = has_cls as usize;
        let patch_pos = table.gather_rows(&(skip..skip + n).collect::<Vec<_>>())?;

        let mut g = Graph::new();
        g.register_frozen(&self.params)?;
        let mut x = embed_visible(&mut g, "encoder", patches, patch_pos)?;
        if has_cls {
            let cls = g.param_var("encoder.cls_token")?;
            let cls = g.broadcast_rows(cls, 1)?;
            let pos0 = g.input(table.gather_rows(&[0])?);
            let cls = g.add(cls, pos0)?;
            x = g.concat_rows(&[cls, x])?;
        }
        for i in 0..self.layer {
            x = encoder_block(&mut g, &format!("encoder.blocks.{i}"), self.encoder.heads, x)?;
        }
        if self.layer == self.encoder.layers {
            x = crate::model::vit_norm(&mut g, "encoder.norm", x)?;
        }
        if has_cls {
            x = g.gather_rows(x, &(1..=n).collect::<Vec<_>>())?;
        }
        let mut out = g.value(x).clone();
        if self.normalize {
            standardize_rows(&mut out);
        }
        Ok(out)
    }
}

/// Scales each row to zero mean and unit population variance, no affine.
pub fn standardize_rows(t: &mut Tensor<f32>) {
    let cols = *t.shape().last().unwrap_or(&1);
    for row in t.data_mut().chunks_mut(cols) {
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-12).sqrt();
        for v in row.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

/// Teacher features for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSeq {
    /// `[B, N, D_t]`
    pub targets: Tensor<f32>,
    pub grid: PatchGrid,
}

impl TargetSeq {
    pub fn new(targets: Tensor<f32>, grid: PatchGrid) -> Result<Self> {
        if targets.ndim() != 3 || targets.shape()[1] != grid.num_patches() {
            return Err(Error::shape(
                "target_seq",
                format!("{:?} for {} patches", targets.shape(), grid.num_patches()),
            ));
        }
        Ok(Self { targets, grid })
    }

    pub fn batch(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.targets.shape()[2]
    }

    /// `[N, D_t]` rows of sample `b`.
    pub fn sample(&self, b: usize) -> Result<Tensor<f32>> {
        self.targets.index_outer(b)
    }
}

/// Runs the frozen teacher on every image of the batch.
pub fn teacher_targets(img: &ImageBatch<f32>, teacher: &Teacher) -> Result<TargetSeq> {
    let grid = img.grid(teacher.patch)?;
    let rows = (0..img.batch())
        .map(|b| teacher.features(&img.image(b)?))
        .collect::<Result<Vec<_>>>()?;
    TargetSeq::new(Tensor::stack(&rows)?, grid)
}

/// Splits targets by absolute position into `T_v: [B,|v|,D]` and
/// `T_m: [B,|m|,D]`, one mask per sample. All masks must share counts.
pub fn split_targets(t: &TargetSeq, masks: &[MaskSpec]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if masks.len() != t.batch() {
        return Err(Error::InvalidArgument(format!("{} masks for {} samples", masks.len(), t.batch())));
    }
    let mut vis = Vec::with_capacity(masks.len());
    let mut msk = Vec::with_capacity(masks.len());
    for (b, m) in masks.iter().enumerate() {
        if m.grid.num_patches() != t.grid.num_patches() || (m.grid.h, m.grid.w) != (t.grid.h, t.grid.w) {
            return Err(Error::InvalidArgument(format!("mask grid {:?} vs target grid {:?}", m.grid, t.grid)));
        }
        let rows = t.sample(b)?;
        vis.push(rows.gather_rows(&m.visible)?);
        msk.push(rows.gather_rows(&m.masked)?);
    }
    Ok((Tensor::stack(&vis)?, Tensor::stack(&msk)?))
}

/// Inverse of [`split_targets`].
pub fn merge_targets(t_v: &Tensor<f32>, t_m: &Tensor<f32>, masks: &[MaskSpec]) -> Result<TargetSeq> {
    let first = masks.first().ok_or_else(|| Error::InvalidArgument("no masks".into()))?;
    let grid = first.grid;
    let d = t_v.shape().get(2).copied().unwrap_or(0);
    let mut rows = Vec::with_capacity(masks.len());
    for (b, m) in masks.iter().enumerate() {
        let mut full = Tensor::zeros(&[grid.num_patches(), d]);
        full.scatter_rows(&m.visible, &t_v.index_outer(b)?)?;
        full.scatter_rows(&m.masked, &t_m.index_outer(b)?)?;
        rows.push(full);
    }
    TargetSeq::new(Tensor::stack(&rows)?, grid)
}

/// In-memory targets keyed by `(dataset id, sample id, augmentation key)`.
#[derive(Clone, Debug, Default)]
pub struct TargetCache {
    map: HashMap<(String, usize, u64), Tensor<f32>>,
    pub hits: u64,
    pub misses: u64,
}

impl TargetCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get_or_compute(
        &mut self,
        dataset: &str,
        sample: usize,
        aug_key: u64,
        compute: impl FnOnce() -> Result<Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        let key = (dataset.to_string(), sample, aug_key);
        if let Some(t) = self.map.get(&key) {
            self.hits += 1;
            return Ok(t.clone());
        }
        self.misses += 1;
        let t = compute()?;
        self.map.insert(key, t.clone());
        Ok(t)
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }

    /// Adds every target of an exported archive.
    pub fn insert_archive(&mut self, archive: &WeightArchive) -> Result<()> {
        let dataset = archive.meta("dataset").ok_or_else(|| Error::MissingEntry("metadata `dataset`".into()))?;
        let aug_key: u64 = archive.meta_parse("aug_key")?;
        for (name, t) in archive.entries.iter() {
            let Some(id) = name.strip_prefix("targets/") else { continue };
            let sample: usize = id.parse().map_err(|_| Error::Format(format!("bad target entry `{name}`")))?;
            self.map.insert((dataset.to_string(), sample, aug_key), t.clone());
        }
        Ok(())
    }
}

fn target_entry(sample: usize) -> String {
    format!("targets/{sample:08}")
}

/// Teacher targets of every sample under one augmentation key, written as
/// a [`WeightArchive`] with entries `targets/<sample>`.
pub fn export_targets(
    dataset: &Dataset,
    teacher: &Teacher,
    aug: &AugmentConfig,
    aug_key: u64,
    norm: &Normalization,
    path: &Path,
) -> Result<WeightArchive> {
    let grid = PatchGrid::for_image(dataset.height, dataset.width, teacher.patch)?;
    let mut store = ParamStore::new();
    for i in 0..dataset.len() {
        store.insert(target_entry(i), teacher.features(&dataset.view(i, aug, aug_key, norm)?)?);
    }
    let archive = WeightArchive::from_store(store)
        .with_meta("dataset", &dataset.id)
        .with_meta("aug_key", aug_key)
        .with_meta("teacher", &teacher.id)
        .with_meta("grid_h", grid.h)
        .with_meta("grid_w", grid.w)
        .with_meta("patch", grid.patch)
        .with_meta("normalize", teacher.normalize);
    archive.write(path)?;
    Ok(archive)
}

/// Reads exported targets for `samples`, in that order.
pub fn load_targets(path: &Path, samples: &[usize]) -> Result<TargetSeq> {
    let archive = WeightArchive::read(path)?;
    let grid = PatchGrid::new(
        archive.meta_parse("grid_h")?,
        archive.meta_parse("grid_w")?,
        archive.meta_parse("patch")?,
    )?;
    let rows = samples
        .iter()
        .map(|&s| archive.get(&target_entry(s)).cloned())
        .collect::<Result<Vec<_>>>()?;
    TargetSeq::new(Tensor::stack(&rows)?, grid)
}
