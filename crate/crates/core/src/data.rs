//! Datasets and augmentation.
//!
//! Two sources are supported:
//!
//! * CIFAR-10 style binary files: a sequence of 3073-byte records, each a
//!   label byte followed by 1024 red, 1024 green and 1024 blue bytes of a
//!   32x32 image in row-major order.
//! * A seeded synthetic generator of smooth images built from low-frequency
//!   sinusoid mixtures. Class `k` of `C` has a dominant plane wave oriented at
//!   `k·π/C`.
//!
//! Pixels are held as `f32` in `[0, 1]`; per-channel standardization is
//! applied when a batch is assembled.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::patching::CHANNELS;
use crate::rng::{self, Purpose};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    images: Vec<Vec<f32>>,
    labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    /// Extra random sinusoids mixed into each channel.
    pub components: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            size: 16,
            classes: 4,
            seed: 0,
            components: 2,
        }
    }
}

/// Per-channel standardization constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    pub fn apply(&self, img: &mut Tensor<f32>) {
        let plane = img.numel() / CHANNELS;
        for (ch, chunk) in img.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
    }
}

impl Dataset {
    pub fn from_parts(
        id: impl Into<String>,
        height: usize,
        width: usize,
        num_classes: usize,
        images: Vec<Vec<f32>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = images.iter().position(|im| im.len() != CHANNELS * height * width) {
            return Err(Error::InvalidArgument(format!(
                "image {bad} does not hold 3x{height}x{width} values"
            )));
        }
        if let Some(bad) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label of sample {bad} outside {num_classes} classes"
            )));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            num_classes,
            images,
            labels,
        })
    }

    pub fn synthetic(cfg: &SyntheticConfig) -> Result<Self> {
        if cfg.samples == 0 || cfg.size == 0 || cfg.classes == 0 {
            return Err(Error::InvalidArgument(
                "synthetic dataset needs positive samples, size and classes".into(),
            ));
        }
        let n = cfg.size;
        let mut images = Vec::with_capacity(cfg.samples);
        let mut labels = Vec::with_capacity(cfg.samples);
        for i in 0..cfg.samples {
            let label = i % cfg.classes;
            let mut r = rng::stream(cfg.seed, Purpose::Data, 0, i as u64);
            let theta = PI * label as f64 / cfg.classes as f64 + r.random_range(-0.1..0.1);
            let freq = r.random_range(1.0..2.0);
            let phase = r.random_range(0.0..2.0 * PI);
            let mut waves = vec![(theta.cos() * freq, theta.sin() * freq, phase, 1.0)];
            for _ in 0..cfg.components {
                waves.push((
                    r.random_range(-1.5..1.5),
                    r.random_range(-1.5..1.5),
                    r.random_range(0.0..2.0 * PI),
                    r.random_range(0.2..0.6),
                ));
            }
            let mut img = vec![0.0f32; CHANNELS * n * n];
            for ch in 0..CHANNELS {
                let gains: Vec<f64> = waves.iter().map(|_| r.random_range(0.5..1.0)).collect();
                let offset = r.random_range(-0.1..0.1);
                for y in 0..n {
                    for x in 0..n {
                        let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
                        let mut s = 0.0;
                        for ((fx, fy, ph, amp), gain) in waves.iter().zip(&gains) {
                            s += amp * gain * (2.0 * PI * (fx * u + fy * v) + ph).sin();
                        }
                        img[(ch * n + y) * n + x] = (0.5 + offset + 0.25 * s).clamp(0.0, 1.0) as f32;
                    }
                }
            }
            images.push(img);
            labels.push(label);
        }
        Self::from_parts(
            format!("synthetic-s{}-n{}-px{}-c{}", cfg.seed, cfg.samples, cfg.size, cfg.classes),
            n,
            n,
            cfg.classes,
            images,
            labels,
        )
    }

    pub fn parse_cifar(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "CIFAR file length {} is not a positive multiple of {CIFAR_RECORD}",
                bytes.len()
            )));
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for rec in bytes.chunks(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            images.push(rec[1..].iter().map(|&b| b as f32 / 255.0).collect());
        }
        let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
        Self::from_parts(id, CIFAR_SIDE, CIFAR_SIDE, classes, images, labels)
    }

    pub fn read_cifar(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let id = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cifar".into());
        Self::parse_cifar(format!("cifar-{id}"), &bytes)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    /// Raw `[3, H, W]` image.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        Tensor::from_vec(vec![CHANNELS, self.height, self.width], self.images[i].clone())
            .expect("image dimensions validated at construction")
    }

    /// Same images with new labels.
    pub fn with_labels(&self, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::from_parts(
            format!("{}-relabeled", self.id),
            self.height,
            self.width,
            num_classes,
            self.images.clone(),
            labels,
        )
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            id: self.id.clone(),
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-channel mean and population standard deviation over all pixels.
    pub fn channel_stats(&self) -> Normalization {
        let plane = self.height * self.width;
        let mut mean = [0.0f32; 3];
        let mut std = [0.0f32; 3];
        for ch in 0..CHANNELS {
            let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0.0f64);
            for img in &self.images {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                    n += 1.0;
                }
            }
            let m = s / n;
            mean[ch] = m as f32;
            std[ch] = ((s2 / n - m * m).max(0.0).sqrt() as f32).max(1e-6);
        }
        Normalization { mean, std }
    }
}

/// Key for the augmentation draws of one epoch. Zero means no augmentation.
pub fn augment_key(seed: u64, epoch: u64, cfg: &AugmentConfig) -> u64 {
    if cfg.enabled {
        rng::stream_key(seed, Purpose::Augment, epoch, 0) | 1
    } else {
        0
    }
}

impl Dataset {
    /// Sample `i` as the models see it: augmented under `aug_key` (unless it
    /// is zero), then standardized.
    pub fn view(&self, i: usize, aug: &AugmentConfig, aug_key: u64, norm: &Normalization) -> Result<Tensor<f32>> {
        if i >= self.len() {
            return Err(Error::InvalidArgument(format!("sample {i} outside dataset of {}", self.len())));
        }
        let mut img = if aug_key == 0 || !aug.enabled {
            self.image(i)
        } else {
            augment(&self.image(i), aug, &mut rng::stream(aug_key, Purpose::Augment, 0, i as u64))?
        };
        norm.apply(&mut img);
        Ok(img)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Crop area as a fraction of the image.
    pub scale: (f64, f64),
    /// Crop aspect ratio (width / height), sampled log-uniformly.
    pub ratio: (f64, f64),
    pub hflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale: (0.35, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip: true,
        }
    }
}

/// Random resized crop (bilinear, back to the input size) followed by an
/// optional horizontal flip. Identity when augmentation is disabled.
pub fn augment(img: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    if !cfg.enabled {
        return Ok(img.clone());
    }
    let (h, w) = match img.shape() {
        &[CHANNELS, h, w] => (h, w),
        s => return Err(Error::shape("augment", format!("expected [3,H,W], got {s:?}"))),
    };
    let area = (h * w) as f64;
    let mut crop = (0, 0, h, w);
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.scale.0..=cfg.scale.1);
        let log_ratio = rng.random_range(cfg.ratio.0.ln()..=cfg.ratio.1.ln());
        let ar = log_ratio.exp();
        let cw = (target * ar).sqrt().round() as usize;
        let ch = (target / ar).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            crop = (top, left, ch, cw);
            break;
        }
    }
    let flip = cfg.hflip && rng.random_bool(0.5);
    let (top, left, ch, cw) = crop;
    let src = img.data();
    let mut out = vec![0.0f32; img.numel()];
    for y in 0..h {
        let sy = top as f64 + ((y as f64 + 0.5) * ch as f64 / h as f64 - 0.5).clamp(0.0, ch as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(top + ch - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..w {
            let sx = left as f64 + ((x as f64 + 0.5) * cw as f64 / w as f64 - 0.5).clamp(0.0, cw as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(left + cw - 1);
            let fx = (sx - x0 as f64) as f32;
            let dx = if flip { w - 1 - x } else { x };
            for c in 0..CHANNELS {
                let at = |yy: usize, xx: usize| src[(c * h + yy) * w + xx];
                let top_row = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot_row = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(c * h + y) * w + dx] = top_row * (1.0 - fy) + bot_row * fy;
            }
        }
    }
    Tensor::from_vec(vec![CHANNELS, h, w], out)
}
