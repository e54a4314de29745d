//! The student: a ViT encoder over visible patches, a one-block
//! cross-attention decoder driven by a learned mask token, and a shared
//! FC + LN head.

mod pipeline;
mod vit;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::rng::{self, Purpose};

pub use pipeline::{forward_pipeline, forward_sample, predict, Prediction, SampleOutput};
pub(crate) use vit::norm as vit_norm;
pub use vit::{attention, decode, embed_visible, encode, encoder_block, head, mlp, LN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    /// Test-only preset for gradient checks and desk-scale runs.
    Micro,
    Tiny,
    Small,
    Base,
    Large,
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            ModelSize::Micro => "micro",
            ModelSize::Tiny => "tiny",
            ModelSize::Small => "small",
            ModelSize::Base => "base",
            ModelSize::Large => "large",
        })
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "micro" => Ok(ModelSize::Micro),
            "tiny" => Ok(ModelSize::Tiny),
            "small" => Ok(ModelSize::Small),
            "base" => Ok(ModelSize::Base),
            "large" => Ok(ModelSize::Large),
            _ => Err(Error::InvalidArgument(format!("unknown model size `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// ViT-Tiny uses 12 heads rather than 3.
    pub fn preset(size: ModelSize) -> Self {
        let (layers, dim, heads) = match size {
            ModelSize::Micro => (4, 64, 4),
            ModelSize::Tiny => (12, 192, 12),
            ModelSize::Small => (12, 384, 6),
            ModelSize::Base => (12, 768, 12),
            ModelSize::Large => (24, 1024, 16),
        };
        Self {
            layers,
            dim,
            heads,
            mlp_ratio: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidArgument(format!("degenerate encoder config {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder width {} must be a multiple of 4 for 2-D position tables",
                self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub size: ModelSize,
    pub patch: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Preset encoder with a matching one-block decoder and a head onto
    /// `target_dim` teacher features.
    pub fn preset(size: ModelSize, patch: usize, target_dim: usize) -> Self {
        let encoder = EncoderConfig::preset(size);
        Self {
            size,
            patch,
            encoder,
            decoder: DecoderConfig {
                blocks: 1,
                dim: encoder.dim,
                heads: encoder.heads,
                mlp_ratio: encoder.mlp_ratio,
            },
            head: HeadConfig {
                in_dim: encoder.dim,
                out_dim: target_dim,
            },
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * crate::patching::CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.patch == 0 {
            return Err(Error::InvalidArgument("patch size must be positive".into()));
        }
        if self.decoder.blocks != 1 {
            return Err(Error::InvalidArgument(format!(
                "decoder must have exactly one block, got {}",
                self.decoder.blocks
            )));
        }
        if self.decoder.dim != self.encoder.dim || self.head.in_dim != self.encoder.dim {
            return Err(Error::InvalidArgument(
                "decoder and head widths must equal the encoder width".into(),
            ));
        }
        if self.decoder.heads == 0 || self.decoder.dim % self.decoder.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "decoder width {} not divisible by {} heads",
                self.decoder.dim, self.decoder.heads
            )));
        }
        if self.head.out_dim == 0 {
            return Err(Error::InvalidArgument("head output width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Weight,
    Zeros,
    Ones,
}

/// Name, shape and initializer of every parameter, in a fixed order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = encoder_layout("encoder", &cfg.encoder, cfg.patch_dim());
    let d = cfg.decoder.dim;
    let hidden = d * cfg.decoder.mlp_ratio;
    out.push(("decoder.mask_token".into(), vec![d], Init::Weight));
    for norm in ["norm_q", "norm_kv", "norm2", "norm"] {
        push_norm(&mut out, &format!("decoder.{norm}"), d);
    }
    push_attention(&mut out, "decoder.attn", d);
    push_linear(&mut out, "decoder.mlp.fc1", d, hidden);
    push_linear(&mut out, "decoder.mlp.fc2", hidden, d);
    push_linear(&mut out, "head.fc", cfg.head.in_dim, cfg.head.out_dim);
    push_norm(&mut out, "head.norm", cfg.head.out_dim);
    out
}

pub(crate) fn encoder_layout(prefix: &str, enc: &EncoderConfig, patch_dim: usize) -> Vec<(String, Vec<usize>, Init)> {
    let d = enc.dim;
    let hidden = d * enc.mlp_ratio;
    let mut out = Vec::new();
    push_linear(&mut out, &format!("{prefix}.patch_embed"), patch_dim, d);
    for i in 0..enc.layers {
        let b = format!("{prefix}.blocks.{i}");
        push_norm(&mut out, &format!("{b}.norm1"), d);
        push_attention(&mut out, &format!("{b}.attn"), d);
        push_norm(&mut out, &format!("{b}.norm2"), d);
        push_linear(&mut out, &format!("{b}.mlp.fc1"), d, hidden);
        push_linear(&mut out, &format!("{b}.mlp.fc2"), hidden, d);
    }
    push_norm(&mut out, &format!("{prefix}.norm"), d);
    out
}

fn push_linear(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push((format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Weight));
    out.push((format!("{prefix}.bias"), vec![fan_out], Init::Zeros));
}

fn push_norm(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gamma"), vec![d], Init::Ones));
    out.push((format!("{prefix}.beta"), vec![d], Init::Zeros));
}

fn push_attention(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{prefix}.{p}"), d, d);
    }
}

pub const INIT_STD: f64 = 0.02;

/// Normal(0, `INIT_STD`) truncated to two standard deviations.
fn trunc_normal(shape: &[usize], seed: u64, name: &str) -> Tensor<f32> {
    let mut r = rng::stream(seed, Purpose::Init, 0, rng::name_hash(name));
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v: f64 = normal.sample(&mut r);
        if v.abs() <= 2.0 * INIT_STD {
            data.push(v as f32);
        }
    }
    Tensor::from_vec(shape.to_vec(), data).expect("init shape")
}

pub(crate) fn init_layout(layout: Vec<(String, Vec<usize>, Init)>, seed: u64) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    for (name, shape, init) in layout {
        let t = match init {
            Init::Weight => trunc_normal(&shape, seed, &name),
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::ones(&shape),
        };
        store.insert(name, t);
    }
    store
}

/// Configs plus the student's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl ModelBundle {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params: init_layout(layout(&config), seed),
        })
    }

    /// Scalar parameter count implied by a config.
    pub fn param_count_for(config: &ModelConfig) -> usize {
        layout(config)
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn encoder_params(&self) -> ParamStore<f32> {
        let mut p = self.params.clone();
        p.retain(|k, _| k.starts_with("encoder."));
        p
    }

    /// Checks that every parameter the config requires is present with the
    /// right shape.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (name, shape, _) in layout(&self.config) {
            let t = self.params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "model_bundle",
                    format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }
}
