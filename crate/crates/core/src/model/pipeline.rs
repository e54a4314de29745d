use crate::error::{Error, Result};
use crate::loss::SupervisionFlags;
use crate::masking::MaskSpec;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::patching::{patchify, sincos_pos_embed, ImageBatch};

use super::vit::{decode, embed_visible, encode, head};
use super::{ModelBundle, ModelConfig};

/// Head outputs for one sample: `Y_v: [|v|, D_t]` and, when masked
/// supervision is active, `Y_m: [|m|, D_t]`.
#[derive(Clone, Copy, Debug)]
pub struct SampleOutput {
    pub visible: Var,
    pub masked: Option<Var>,
}

/// Student forward pass for one image.
///
/// `patches: [N, P·P·3]` and `pos: [N, d]`. Only the visible rows of
/// `patches` are ever recorded on the graph. The decoder runs only when
/// `need_masked` is set and at least one patch is masked.
pub fn forward_sample<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    patches: &Tensor<T>,
    pos: &Tensor<T>,
    mask: &MaskSpec,
    need_masked: bool,
) -> Result<SampleOutput> {
    let n = mask.grid.num_patches();
    if patches.shape() != [n, cfg.patch_dim()] {
        return Err(Error::shape(
            "forward_sample",
            format!("patches {:?} for {n} patches of width {}", patches.shape(), cfg.patch_dim()),
        ));
    }
    if mask.visible.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one visible patch is required to run the encoder".into(),
        ));
    }
    let pos_v = pos.gather_rows(&mask.visible)?;
    let x = embed_visible(g, "encoder", patches.gather_rows(&mask.visible)?, pos_v.clone())?;
    let z_v = encode(g, "encoder", &cfg.encoder, x)?;
    let visible = head(g, "head", z_v)?;
    let masked = if need_masked && !mask.masked.is_empty() {
        let pv = g.input(pos_v);
        let pm = g.input(pos.gather_rows(&mask.masked)?);
        let z_m = decode(g, "decoder", &cfg.decoder, z_v, pv, pm)?;
        Some(head(g, "head", z_m)?)
    } else {
        None
    };
    Ok(SampleOutput { visible, masked })
}

/// Student forward pass over a batch with one mask per image.
///
/// The graph must already hold the student parameters under their bundle
/// names (trainable or frozen).
pub fn forward_pipeline<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    img: &ImageBatch<T>,
    masks: &[MaskSpec],
    flags: SupervisionFlags,
) -> Result<Vec<SampleOutput>> {
    cfg.validate()?;
    let grid = img.grid(cfg.patch)?;
    if masks.len() != img.batch() {
        return Err(Error::InvalidArgument(format!(
            "{} masks for a batch of {}",
            masks.len(),
            img.batch()
        )));
    }
    if let Some(m) = masks.iter().find(|m| m.grid != grid) {
        return Err(Error::InvalidArgument(format!(
            "mask grid {:?} does not match image grid {grid:?}",
            m.grid
        )));
    }
    let patches = patchify(img, cfg.patch)?;
    let pos = sincos_pos_embed::<T>(grid.h, grid.w, cfg.encoder.dim)?;
    masks
        .iter()
        .enumerate()
        .map(|(b, mask)| forward_sample(g, cfg, &patches.index_outer(b)?, &pos, mask, flags.masked()))
        .collect()
}

/// Values of a forward pass with frozen weights.
#[derive(Clone, Debug)]
pub struct Prediction<T = f32> {
    /// `[B, |v|, D_t]`
    pub visible: Tensor<T>,
    /// `[B, |m|, D_t]` when masked supervision is active.
    pub masked: Option<Tensor<T>>,
}

/// Runs [`forward_pipeline`] without recording gradients.
pub fn predict(
    bundle: &ModelBundle,
    img: &ImageBatch<f32>,
    masks: &[MaskSpec],
    flags: SupervisionFlags,
) -> Result<Prediction<f32>> {
    let mut g = Graph::new();
    g.register_frozen(&bundle.params)?;
    let outs = forward_pipeline(&mut g, &bundle.config, img, masks, flags)?;
    let visible = Tensor::stack(&outs.iter().map(|o| g.value(o.visible).clone()).collect::<Vec<_>>())?;
    let masked = if outs.iter().all(|o| o.masked.is_some()) && !outs.is_empty() {
        let m: Vec<_> = outs.iter().filter_map(|o| o.masked).map(|v| g.value(v).clone()).collect();
        Some(Tensor::stack(&m)?)
    } else {
        None
    };
    Ok(Prediction { visible, masked })
}
