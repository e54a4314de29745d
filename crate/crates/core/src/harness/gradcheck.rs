use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::loss::{sample_loss, LossKind, SupervisionFlags};
use crate::masking::random_mask;
use crate::model::{forward_sample, ModelBundle, ModelConfig, ModelSize};
use crate::numerics::{finite_diff_check, GradCheckReport, ProbeMode, Tensor};
use crate::patching::{patchify, sincos_pos_embed, ImageBatch};
use crate::rng::{self, Purpose};

/// Shape of the end-to-end gradient fixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineCheck {
    pub image: usize,
    pub patch: usize,
    pub masked: usize,
    pub target_dim: usize,
    pub eps: f64,
    pub probes_per_tensor: usize,
    pub seed: u64,
}

impl Default for PipelineCheck {
    fn default() -> Self {
        Self {
            image: 8,
            patch: 4,
            masked: 2,
            target_dim: 16,
            eps: 1e-4,
            probes_per_tensor: 1,
            seed: 0,
        }
    }
}

/// Finite-difference check of the Micro student plus the supervision loss, with
/// random image, mask and targets, in `f64`.
///
/// Parameters are drawn with a larger spread than the training init so
/// attention and norms are away from their symmetric starting point.
pub fn pipeline_gradcheck(check: &PipelineCheck, flags: SupervisionFlags, kind: LossKind) -> Result<GradCheckReport> {
    let cfg = ModelConfig::preset(ModelSize::Micro, check.patch, check.target_dim);
    let mut params = ModelBundle::init(cfg, check.seed)?.params.cast::<f64>();
    let mut r = rng::stream(check.seed, Purpose::Data, 0, 0);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            let noise: f64 = r.sample(StandardNormal);
            *v += 0.2 * noise;
        }
    }
    let px = 3 * check.image * check.image;
    let img: Vec<f64> = (0..px).map(|_| r.random_range(-1.0..1.0)).collect();
    let img = ImageBatch::new(Tensor::from_vec(vec![1, 3, check.image, check.image], img)?)?;
    let grid = img.grid(check.patch)?;
    let patches = patchify(&img, check.patch)?.index_outer(0)?;
    let pos = sincos_pos_embed::<f64>(grid.h, grid.w, cfg.encoder.dim)?;
    let mask = random_mask(grid, check.masked, &mut r)?;
    let n = grid.num_patches();
    let tdata: Vec<f64> = (0..n * check.target_dim).map(|_| r.sample(StandardNormal)).collect();
    let targets = Tensor::from_vec(vec![n, check.target_dim], tdata)?;
    let t_v = targets.gather_rows(&mask.visible)?;
    let t_m = targets.gather_rows(&mask.masked)?;
    finite_diff_check(
        |g| {
            let out = forward_sample(g, &cfg, &patches, &pos, &mask, flags.masked())?;
            let v = if flags.visible() { Some((out.visible, g.input(t_v.clone()))) } else { None };
            let m = match out.masked {
                Some(y) => Some((y, g.input(t_m.clone()))),
                None => None,
            };
            sample_loss(g, v, m, flags, kind)
        },
        &params,
        check.eps,
        ProbeMode::PerTensor {
            count: check.probes_per_tensor,
            seed: check.seed,
        },
    )
}
