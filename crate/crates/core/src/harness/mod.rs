//! Evaluation and experiment surface: feature extraction, linear probing,
//! fine-tuning and ablation sweeps.

mod gradcheck;
mod probe;
mod sweep;

pub use probe::{
    dataset_features, extract_features, finetune, linear_probe, probe_features, split_indices, EvalReport,
    FinetuneConfig, ProbeConfig,
};
pub use gradcheck::{pipeline_gradcheck, PipelineCheck};
pub use sweep::{read_sweep, run_cell, run_sweep, Cell, SweepPlan, SweepReport, SweepRow, SWEEP_FILE};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::patching::{patchify, ImageBatch};
use crate::numerics::Tensor;
use crate::rng::{self, Purpose};
use crate::teacher::Teacher;

use rand_distr::{Distribution, StandardNormal};

/// Relabels `dataset` by the part of the teacher's representation that no
/// linear function of the image's mean patch explains.
///
/// Mean-pooled teacher features of each unaugmented image are regressed on
/// the mean patch vector (plus intercept); the residuals are projected onto
/// their leading principal direction and cut into `classes` equally sized quantile
/// bins. Labels defined this way are recoverable to the extent a student
/// reproduces the teacher's nonlinear features.
pub fn distillation_labels(dataset: &Dataset, teacher: &Teacher, classes: usize, seed: u64) -> Result<Dataset> {
    let norm = dataset.channel_stats();
    let d = teacher.dim();
    let n = dataset.len();
    let mut feats = Vec::with_capacity(n);
    let mut design = Vec::with_capacity(n);
    for i in 0..n {
        let view = dataset.view(i, &Default::default(), 0, &norm)?;
        let f: Tensor<f32> = teacher.features(&view)?;
        feats.push(column_means(f.data(), d));
        let patches = patchify(&ImageBatch::from_images(&[view])?, teacher.patch)?;
        let pd = patches.shape()[2];
        let mut x = column_means(patches.data(), pd);
        x.push(1.0);
        design.push(x);
    }
    let resid = residuals(&design, &feats)?;
    let dir = top_component(&resid, seed);
    let mut scores: Vec<(f64, usize)> = resid
        .iter()
        .enumerate()
        .map(|(i, row)| (row.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>(), i))
        .collect();
    scores.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut labels = vec![0; n];
    for (rank, &(_, i)) in scores.iter().enumerate() {
        labels[i] = rank * classes / n;
    }
    dataset.with_labels(labels, classes)
}

/// Leading principal direction of centered rows by power iteration.
fn top_component(rows: &[Vec<f64>], seed: u64) -> Vec<f64> {
    let d = rows[0].len();
    let mean = {
        let mut m = vec![0.0; d];
        for r in rows {
            m.iter_mut().zip(r).for_each(|(a, b)| *a += b / rows.len() as f64);
        }
        m
    };
    let mut r = rng::stream(seed, Purpose::Probe, u64::MAX, 0);
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
    for _ in 0..200 {
        let mut next = vec![0.0; d];
        for row in rows {
            let proj: f64 = row.iter().zip(&mean).zip(&v).map(|((x, m), w)| (x - m) * w).sum();
            next.iter_mut().zip(row.iter().zip(&mean)).for_each(|(a, (x, m))| *a += proj * (x - m));
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        v = next.into_iter().map(|x| x / norm).collect();
    }
    v
}

fn column_means(data: &[f32], cols: usize) -> Vec<f64> {
    let rows = data.len() / cols;
    let mut m = vec![0.0f64; cols];
    for row in data.chunks(cols) {
        for (a, &v) in m.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    m.iter_mut().for_each(|v| *v /= rows as f64);
    m
}

/// Least-squares residuals of each target column on the design matrix,
/// with a small ridge so that collinear designs stay solvable.
fn residuals(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let p = x[0].len();
    let q = y[0].len();
    let mut a = vec![vec![0.0f64; p + q]; p];
    for (xr, yr) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += xr[i] * xr[j];
            }
            for k in 0..q {
                a[i][p + k] += xr[i] * yr[k];
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1e-6 * x.len() as f64;
    }
    // Gauss-Jordan with partial pivoting on [XᵀX | XᵀY].
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap_or(c);
        a.swap(c, piv);
        let d = a[c][c];
        if d.abs() < 1e-300 {
            return Err(Error::InvalidArgument("singular design in label regression".into()));
        }
        for v in a[c].iter_mut() {
            *v /= d;
        }
        let pivot_row = a[c].clone();
        for (i, row) in a.iter_mut().enumerate() {
            if i != c && row[c] != 0.0 {
                let f = row[c];
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    Ok(x.iter()
        .zip(y)
        .map(|(xr, yr)| {
            (0..q)
                .map(|k| yr[k] - (0..p).map(|i| xr[i] * a[i][p + k]).sum::<f64>())
                .collect()
        })
        .collect())
}
