//! Transformer building blocks recorded on a [`Graph`].
//!
//! Parameters are looked up by name from the graph's registry, so the same
//! code serves the trainable student, the frozen teacher and the `f64`
//! gradient-check replicas.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

use super::{DecoderConfig, EncoderConfig};

pub const LN_EPS: f64 = 1e-6;

fn p<T: Scalar>(g: &Graph<T>, prefix: &str, name: &str) -> Result<Var> {
    g.param_var(&format!("{prefix}.{name}"))
}

pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = p(g, prefix, "weight")?;
    let b = p(g, prefix, "bias")?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn norm<T: Scalar>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p(g, prefix, "gamma")?;
    let beta = p(g, prefix, "beta")?;
    g.layernorm(x, gamma, beta, LN_EPS)
}

/// Multi-head attention of `queries: [nq,d]` over `context: [nk,d]`.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    prefix: &str,
    heads: usize,
    queries: Var,
    context: Var,
) -> Result<Var> {
    let d = g.shape(queries)[1];
    if d % heads != 0 {
        return Err(Error::shape("attention", format!("width {d} over {heads} heads")));
    }
    let hd = d / heads;
    let q = linear(g, &format!("{prefix}.q"), queries)?;
    let k = linear(g, &format!("{prefix}.k"), context)?;
    let v = linear(g, &format!("{prefix}.v"), context)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax_rows(scores)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, &format!("{prefix}.o"), o)
}

pub fn mlp<T: Scalar>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, &format!("{prefix}.fc2"), h)
}

/// Pre-norm self-attention block.
pub fn encoder_block<T: Scalar>(g: &mut Graph<T>, prefix: &str, heads: usize, x: Var) -> Result<Var> {
    let h = norm(g, &format!("{prefix}.norm1"), x)?;
    let a = attention(g, &format!("{prefix}.attn"), heads, h, h)?;
    let x = g.add(x, a)?;
    let h = norm(g, &format!("{prefix}.norm2"), x)?;
    let m = mlp(g, &format!("{prefix}.mlp"), h)?;
    g.add(x, m)
}

/// Projects patch rows `[n, P·P·3]` and adds their position rows `[n, d]`.
pub fn embed_visible<T: Scalar>(
    g: &mut Graph<T>,
    prefix: &str,
    patches: Tensor<T>,
    pos: Tensor<T>,
) -> Result<Var> {
    let x = g.input(patches);
    let pos = g.input(pos);
    let w = p(g, prefix, "patch_embed.weight")?;
    let b = p(g, prefix, "patch_embed.bias")?;
    crate::patching::embed_patches(g, x, w, b, pos)
}

/// Encoder stack over already embedded tokens `[n, d]`, ending in a LN.
pub fn encode<T: Scalar>(g: &mut Graph<T>, prefix: &str, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let d = g.shape(x)[1];
    if d != cfg.dim {
        return Err(Error::shape("encode", format!("token width {d}, encoder width {}", cfg.dim)));
    }
    let mut x = x;
    for i in 0..cfg.layers {
        x = encoder_block(g, &format!("{prefix}.blocks.{i}"), cfg.heads, x)?;
    }
    norm(g, &format!("{prefix}.norm"), x)
}

/// Predicts latents for the masked positions.
///
/// Queries are the mask token plus `pos_m`; keys and values are `z_v + pos_v`.
/// Mask-token queries attend only to the visible latents.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    prefix: &str,
    cfg: &DecoderConfig,
    z_v: Var,
    pos_v: Var,
    pos_m: Var,
) -> Result<Var> {
    let n_m = g.shape(pos_m)[0];
    if n_m == 0 {
        return Err(Error::InvalidArgument("decode called with no masked positions".into()));
    }
    if g.shape(z_v)[1] != cfg.dim {
        return Err(Error::shape("decode", format!("latent width {}, decoder width {}", g.shape(z_v)[1], cfg.dim)));
    }
    let token = p(g, prefix, "mask_token")?;
    let queries = g.broadcast_rows(token, n_m)?;
    let queries = g.add(queries, pos_m)?;
    let context = g.add(z_v, pos_v)?;
    let hq = norm(g, &format!("{prefix}.norm_q"), queries)?;
    let hc = norm(g, &format!("{prefix}.norm_kv"), context)?;
    let a = attention(g, &format!("{prefix}.attn"), cfg.heads, hq, hc)?;
    let x = g.add(queries, a)?;
    let h = norm(g, &format!("{prefix}.norm2"), x)?;
    let m = mlp(g, &format!("{prefix}.mlp"), h)?;
    let x = g.add(x, m)?;
    norm(g, &format!("{prefix}.norm"), x)
}

/// FC followed by LN, applied row-wise.
pub fn head<T: Scalar>(g: &mut Graph<T>, prefix: &str, z: Var) -> Result<Var> {
    let fc_in = g.shape(g.param_var(&format!("{prefix}.fc.weight"))?)[0];
    if g.shape(z)[1] != fc_in {
        return Err(Error::shape("head", format!("input width {}, head expects {fc_in}", g.shape(z)[1])));
    }
    let y = linear(g, &format!("{prefix}.fc"), z)?;
    norm(g, &format!("{prefix}.norm"), y)
}
