//! Images to patch sequences and back, patch embeddings and the fixed 2-D
//! sine-cosine position table.
//!
//! Patches are numbered row-major over the grid: patch `i` sits at grid row
//! `i / w` and column `i % w`. Within a patch vector values are laid out as
//! `(row, col, channel)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    /// Rows of patches.
    pub h: usize,
    /// Columns of patches.
    pub w: usize,
    /// Patch side in pixels.
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, patch: usize) -> Result<Self> {
        if h == 0 || w == 0 || patch == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch grid {h}x{w} with patch {patch} must be positive"
            )));
        }
        Ok(Self { h, w, patch })
    }

    /// Grid for an `height x width` image.
    pub fn for_image(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} is not divisible into {patch}x{patch} patches"
            )));
        }
        Self::new(height / patch, width / patch, patch)
    }

    pub fn num_patches(&self) -> usize {
        self.h * self.w
    }

    /// Length of one flattened patch vector.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.w, index % self.w)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.w + col
    }
}

/// `[B, 3, H, W]` pixels, already standardized per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T = f32> {
    data: Tensor<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        match data.shape() {
            [_, CHANNELS, _, _] => Ok(Self { data }),
            s => Err(Error::shape("image_batch", format!("expected [B,3,H,W], got {s:?}"))),
        }
    }

    pub fn from_images(images: &[Tensor<T>]) -> Result<Self> {
        Self::new(Tensor::stack(images)?)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn image(&self, b: usize) -> Result<Tensor<T>> {
        self.data.index_outer(b)
    }

    pub fn grid(&self, patch: usize) -> Result<PatchGrid> {
        PatchGrid::for_image(self.height(), self.width(), patch)
    }

    pub fn cast<U: Scalar>(&self) -> ImageBatch<U> {
        ImageBatch {
            data: self.data.cast(),
        }
    }
}

/// `[B,3,H,W]` → `[B, N, P·P·3]`.
pub fn patchify<T: Scalar>(img: &ImageBatch<T>, patch: usize) -> Result<Tensor<T>> {
    let grid = img.grid(patch)?;
    let (b, hh, ww) = (img.batch(), img.height(), img.width());
    let n = grid.num_patches();
    let pd = grid.patch_dim();
    let src = img.tensor().data();
    let mut out = vec![T::zero(); b * n * pd];
    for bi in 0..b {
        for pi in 0..n {
            let (gr, gc) = grid.coords(pi);
            let dst = &mut out[(bi * n + pi) * pd..(bi * n + pi + 1) * pd];
            for r in 0..patch {
                for c in 0..patch {
                    for ch in 0..CHANNELS {
                        let y = gr * patch + r;
                        let x = gc * patch + c;
                        dst[(r * patch + c) * CHANNELS + ch] = src[((bi * CHANNELS + ch) * hh + y) * ww + x];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b, n, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, grid: PatchGrid) -> Result<ImageBatch<T>> {
    let (b, n, pd) = match patches.shape() {
        &[b, n, pd] => (b, n, pd),
        s => return Err(Error::shape("unpatchify", format!("expected [B,N,D], got {s:?}"))),
    };
    if n != grid.num_patches() || pd != grid.patch_dim() {
        return Err(Error::shape(
            "unpatchify",
            format!("[{b},{n},{pd}] for grid {}x{} patch {}", grid.h, grid.w, grid.patch),
        ));
    }
    let p = grid.patch;
    let (hh, ww) = (grid.h * p, grid.w * p);
    let src = patches.data();
    let mut out = vec![T::zero(); b * CHANNELS * hh * ww];
    for bi in 0..b {
        for pi in 0..n {
            let (gr, gc) = grid.coords(pi);
            let s = &src[(bi * n + pi) * pd..(bi * n + pi + 1) * pd];
            for r in 0..p {
                for c in 0..p {
                    for ch in 0..CHANNELS {
                        out[((bi * CHANNELS + ch) * hh + gr * p + r) * ww + gc * p + c] = s[(r * p + c) * CHANNELS + ch];
                    }
                }
            }
        }
    }
    ImageBatch::new(Tensor::from_vec(vec![b, CHANNELS, hh, ww], out)?)
}

/// Linear projection of each patch plus its position row, recorded on `g`.
///
/// `patches: [n, P·P·3]`, `weight: [P·P·3, d]`, `bias: [d]`, `pos: [n, d]`.
pub fn embed_patches<T: Scalar>(
    g: &mut Graph<T>,
    patches: Var,
    weight: Var,
    bias: Var,
    pos: Var,
) -> Result<Var> {
    if g.shape(pos)[0] != g.shape(patches)[0] {
        return Err(Error::shape(
            "embed_patches",
            format!("{} patches but {} position rows", g.shape(patches)[0], g.shape(pos)[0]),
        ));
    }
    let x = g.matmul(patches, weight)?;
    let x = g.add_row(x, bias)?;
    g.add(x, pos)
}

/// Batched form of [`embed_patches`]: `[B,N,P·P·3]` → `[B,N,d]`.
pub fn embed_patch_batch<T: Scalar>(
    patches: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pos: &Tensor<T>,
) -> Result<Tensor<T>> {
    let b = patches.shape()[0];
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut g = Graph::new();
        let p = g.input(patches.index_outer(i)?);
        let w = g.input(weight.clone());
        let bi = g.input(bias.clone());
        let ps = g.input(pos.clone());
        let e = embed_patches(&mut g, p, w, bi, ps)?;
        out.push(g.value(e).clone());
    }
    Tensor::stack(&out)
}

/// Fixed 2-D sine-cosine position table, `[h·w, d]`.
///
/// The first half of each row encodes the grid row, the second half the grid
/// column; each half is `d/4` sines followed by `d/4` cosines at frequencies
/// `10000^(-k/(d/4))`.
pub fn sincos_pos_embed<T: Scalar>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "position embedding width {d} must be a positive multiple of 4"
        )));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|o| T::from_f64((pos * o).sin())));
                data.extend(omega.iter().map(|o| T::from_f64((pos * o).cos())));
            }
        }
    }
    Tensor::from_vec(vec![h * w, d], data)
}
