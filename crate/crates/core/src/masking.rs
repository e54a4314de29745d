//! Visible/masked partitions of a patch grid.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSize;
use crate::patching::PatchGrid;

/// Smallest block area the block-wise sampler draws.
pub const MIN_BLOCK_AREA: usize = 16;
pub const ASPECT_MIN: f64 = 0.3;
pub const ASPECT_MAX: f64 = 10.0 / 3.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub grid: PatchGrid,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskSpec {
    /// Builds a mask from a per-patch masked flag.
    pub fn from_flags(grid: PatchGrid, flags: &[bool]) -> Result<Self> {
        if flags.len() != grid.num_patches() {
            return Err(Error::InvalidArgument(format!(
                "{} mask flags for {} patches",
                flags.len(),
                grid.num_patches()
            )));
        }
        let (mut visible, mut masked) = (Vec::new(), Vec::new());
        for (i, &m) in flags.iter().enumerate() {
            if m {
                masked.push(i);
            } else {
                visible.push(i);
            }
        }
        Ok(Self { grid, visible, masked })
    }

    /// Realized mask ratio `|m| / N`.
    pub fn gamma(&self) -> f64 {
        self.masked.len() as f64 / self.grid.num_patches() as f64
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.grid.num_patches()];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }

    /// Text grid with `.` for visible and `#` for masked patches.
    pub fn render(&self) -> String {
        let flags = self.flags();
        let mut s = String::with_capacity(self.grid.num_patches() + self.grid.h);
        for r in 0..self.grid.h {
            for c in 0..self.grid.w {
                s.push(if flags[self.grid.index(r, c)] { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Random,
    #[default]
    Blockwise,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            SamplerKind::Random => "random",
            SamplerKind::Blockwise => "blockwise",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(SamplerKind::Random),
            "blockwise" | "block" => Ok(SamplerKind::Blockwise),
            _ => Err(Error::InvalidArgument(format!("unknown sampler `{s}`"))),
        }
    }
}

/// Number of masked patches for ratio `gamma`: `gamma·N` rounded half up.
pub fn target_mask_count(n: usize, gamma: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("mask ratio {gamma} outside [0, 1]")));
    }
    let count = (gamma * n as f64 + 0.5).floor() as usize;
    Ok(count.min(n))
}

fn check_count(grid: &PatchGrid, count: usize) -> Result<()> {
    if count > grid.num_patches() {
        return Err(Error::InvalidArgument(format!(
            "mask count {count} exceeds {} patches",
            grid.num_patches()
        )));
    }
    Ok(())
}

/// Uniform sample of `count` masked patches without replacement.
pub fn random_mask(grid: PatchGrid, count: usize, rng: &mut impl Rng) -> Result<MaskSpec> {
    check_count(&grid, count)?;
    let mut idx: Vec<usize> = (0..grid.num_patches()).collect();
    idx.shuffle(rng);
    let mut flags = vec![false; grid.num_patches()];
    for &i in &idx[..count] {
        flags[i] = true;
    }
    MaskSpec::from_flags(grid, &flags)
}

/// Rectangular blocks are placed until at least `count` patches are covered,
/// then uniformly chosen masked patches are released until exactly `count`
/// remain.
pub fn blockwise_mask(grid: PatchGrid, count: usize, rng: &mut impl Rng) -> Result<MaskSpec> {
    check_count(&grid, count)?;
    let (h, w) = (grid.h, grid.w);
    let mut flags = vec![false; grid.num_patches()];
    let mut masked = 0usize;
    let log_lo = ASPECT_MIN.ln();
    let log_hi = ASPECT_MAX.ln();
    while masked < count {
        let lo = MIN_BLOCK_AREA.min(count) as f64;
        let hi = lo.max((count - masked) as f64);
        let area = rng.random_range(lo..=hi);
        let aspect = rng.random_range(log_lo..log_hi).exp();
        let bh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let bw = ((area / aspect).sqrt().round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - bh);
        let left = rng.random_range(0..=w - bw);
        for r in top..top + bh {
            for c in left..left + bw {
                let i = grid.index(r, c);
                if !flags[i] {
                    flags[i] = true;
                    masked += 1;
                }
            }
        }
    }
    if masked > count {
        let mut on: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
        on.shuffle(rng);
        for &i in &on[..masked - count] {
            flags[i] = false;
        }
    }
    MaskSpec::from_flags(grid, &flags)
}

pub fn sample_mask(kind: SamplerKind, grid: PatchGrid, count: usize, rng: &mut impl Rng) -> Result<MaskSpec> {
    match kind {
        SamplerKind::Random => random_mask(grid, count, rng),
        SamplerKind::Blockwise => blockwise_mask(grid, count, rng),
    }
}

/// Default mask ratio per encoder size: smaller models mask less.
pub fn default_ratio(size: ModelSize) -> Result<f64> {
    match size {
        ModelSize::Tiny => Ok(0.15),
        ModelSize::Small => Ok(0.25),
        ModelSize::Base => Ok(0.50),
        ModelSize::Large => Ok(0.50),
        ModelSize::Micro => Err(Error::InvalidArgument(
            "no default mask ratio for the micro test preset".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn grid(h: usize, w: usize) -> PatchGrid {
        PatchGrid::new(h, w, 16).unwrap()
    }

    #[test]
    fn mask_counts_round_half_up() {
        assert_eq!(target_mask_count(196, 0.50).unwrap(), 98);
        assert_eq!(target_mask_count(196, 0.15).unwrap(), 29);
        assert_eq!(target_mask_count(196, 0.25).unwrap(), 49);
        assert_eq!(target_mask_count(4, 0.125).unwrap(), 1);
        assert_eq!(target_mask_count(10, 1.0).unwrap(), 10);
        assert!(target_mask_count(10, 1.5).is_err());
        assert!(target_mask_count(10, -0.1).is_err());
    }

    #[test]
    fn extreme_counts() {
        let g = grid(14, 14);
        for kind in [SamplerKind::Random, SamplerKind::Blockwise] {
            let mut r = stream(1, Purpose::Mask, 0, 0);
            let none = sample_mask(kind, g, 0, &mut r).unwrap();
            assert_eq!(none.visible.len(), 196);
            assert!(none.masked.is_empty());
            let all = sample_mask(kind, g, 196, &mut r).unwrap();
            assert_eq!(all.masked.len(), 196);
            assert!(all.visible.is_empty());
            assert!(sample_mask(kind, g, 197, &mut r).is_err());
        }
    }

    #[test]
    fn render_marks_masked_cells() {
        let g = grid(2, 3);
        let m = MaskSpec::from_flags(g, &[true, false, false, false, false, true]).unwrap();
        assert_eq!(m.render(), "#..\n..#\n");
        assert_eq!(m.gamma(), 2.0 / 6.0);
    }

    #[test]
    fn default_ratios_follow_model_size() {
        assert_eq!(default_ratio(ModelSize::Tiny).unwrap(), 0.15);
        assert_eq!(default_ratio(ModelSize::Small).unwrap(), 0.25);
        assert_eq!(default_ratio(ModelSize::Base).unwrap(), 0.50);
        assert_eq!(default_ratio(ModelSize::Large).unwrap(), 0.50);
        assert!(default_ratio(ModelSize::Micro).is_err());
        let sizes = [ModelSize::Tiny, ModelSize::Small, ModelSize::Base, ModelSize::Large];
        let ratios: Vec<f64> = sizes.iter().map(|&s| default_ratio(s).unwrap()).collect();
        assert!(ratios.windows(2).all(|w| w[0] <= w[1]));
    }
}
