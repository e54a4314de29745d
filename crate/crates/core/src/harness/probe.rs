use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{embed_visible, encode, ModelBundle, LN_EPS};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::patching::{patchify, sincos_pos_embed, ImageBatch};
use crate::rng::{self, Purpose};
use crate::train::{adamw_step, AdamWConfig, OptimState};

use rand::seq::SliceRandom;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Fraction of samples held out for evaluation.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-2,
            batch_size: 32,
            weight_decay: 0.0,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub holdout: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 0.05,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Deterministic `(train, held-out)` split of `0..n`.
pub fn split_indices(n: usize, holdout: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(Error::InvalidArgument(format!("holdout fraction {holdout} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Probe, 0, 0));
    let test = ((n as f64 * holdout).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two samples to split".into()));
    }
    let train = idx.split_off(test);
    let mut test_idx = idx;
    let mut train_idx = train;
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((train_idx, test_idx))
}

/// Mean over all patch tokens of the final encoder layer, `[B, d]`.
///
/// No patch is masked.
pub fn extract_features(bundle: &ModelBundle, img: &ImageBatch<f32>) -> Result<Tensor<f32>> {
    let cfg = &bundle.config;
    let grid = img.grid(cfg.patch)?;
    let pos = sincos_pos_embed::<f32>(grid.h, grid.w, cfg.encoder.dim)?;
    let patches = patchify(img, cfg.patch)?;
    let mut enc = ParamStore::new();
    for (n, t) in bundle.params.iter().filter(|(n, _)| n.starts_with("encoder.")) {
        enc.insert(n.clone(), t.clone());
    }
    let mut rows = Vec::with_capacity(img.batch());
    for b in 0..img.batch() {
        let mut g = Graph::new();
        g.register_frozen(&enc)?;
        let x = embed_visible(&mut g, "encoder", patches.index_outer(b)?, pos.clone())?;
        let z = encode(&mut g, "encoder", &cfg.encoder, x)?;
        let f = g.mean_rows(z)?;
        rows.push(g.value(f).clone().reshape(vec![cfg.encoder.dim])?);
    }
    Tensor::stack(&rows)
}

/// Features for every sample of `dataset`, unaugmented and standardized by
/// `norm`, `[n, d]`.
pub fn dataset_features(bundle: &ModelBundle, dataset: &Dataset, norm: &Normalization) -> Result<Tensor<f32>> {
    let mut rows = Vec::with_capacity(dataset.len());
    for chunk in (0..dataset.len()).collect::<Vec<_>>().chunks(64) {
        let imgs = chunk
            .iter()
            .map(|&i| dataset.view(i, &Default::default(), 0, norm))
            .collect::<Result<Vec<_>>>()?;
        let f = extract_features(bundle, &ImageBatch::from_images(&imgs)?)?;
        for b in 0..chunk.len() {
            rows.push(f.index_outer(b)?);
        }
    }
    Tensor::stack(&rows)
}

fn check_labels(dataset: &Dataset) -> Result<()> {
    if dataset.num_classes < 2 {
        return Err(Error::InvalidArgument("classification needs at least two classes".into()));
    }
    if let Some(i) = dataset.labels().iter().position(|&l| l >= dataset.num_classes) {
        return Err(Error::InvalidArgument(format!("label of sample {i} outside {} classes", dataset.num_classes)));
    }
    Ok(())
}

fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            // First maximum wins, so an all-zero row predicts class 0.
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
            best == l
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Trains an affine softmax classifier on frozen, mean-pooled encoder
/// features and reports held-out top-1 accuracy.
///
/// Features are standardized with statistics of the training split.
pub fn linear_probe(bundle: &ModelBundle, dataset: &Dataset, cfg: &ProbeConfig) -> Result<EvalReport> {
    check_labels(dataset)?;
    let norm = dataset.channel_stats();
    let feats = dataset_features(bundle, dataset, &norm)?;
    probe_features(&feats, dataset.labels(), dataset.num_classes, cfg)
}

/// [`linear_probe`] on precomputed `[n, d]` features.
pub fn probe_features(feats: &Tensor<f32>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<EvalReport> {
    let (n, d) = feats.dims2("probe_features")?;
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{n} feature rows but {} labels", labels.len())));
    }
    let (train, test) = split_indices(n, cfg.holdout, cfg.seed)?;
    let xtr = feats.gather_rows(&train)?;
    let (mean, std) = column_stats(&xtr);
    let standardize = |x: Tensor<f32>| -> Tensor<f32> {
        let mut x = x;
        for row in x.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) / std[j];
            }
        }
        x
    };
    let xtr = standardize(xtr);
    let xte = standardize(feats.gather_rows(&test)?);
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();

    let mut params = ParamStore::new();
    params.insert("probe.weight", Tensor::zeros(&[d, classes]));
    params.insert("probe.bias", Tensor::zeros(&[classes]));
    let hyper = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = OptimState::new(&params, hyper, cfg.lr);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Probe, epoch as u64 + 1, 0));
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            g.register(&params)?;
            let x = g.input(xtr.gather_rows(batch)?);
            let logits = affine(&mut g, "probe", x)?;
            let y: Vec<usize> = batch.iter().map(|&i| ytr[i]).collect();
            let loss = g.cross_entropy(logits, &y)?;
            let grads = g.backward(loss)?.into_store();
            adamw_step(&mut params, &grads, &mut state, cfg.lr)?;
        }
    }
    let eval = |x: &Tensor<f32>, y: &[usize]| -> Result<f64> {
        let mut g = Graph::new();
        g.register_frozen(&params)?;
        let xv = g.input(x.clone());
        let l = affine(&mut g, "probe", xv)?;
        Ok(accuracy(g.value(l), y))
    };
    Ok(EvalReport {
        accuracy: eval(&xte, &yte)?,
        train_accuracy: eval(&xtr, &ytr)?,
        train_samples: train.len(),
        test_samples: test.len(),
    })
}

fn affine(g: &mut Graph<f32>, prefix: &str, x: crate::Var) -> Result<crate::Var> {
    let w = g.param_var(&format!("{prefix}.weight"))?;
    let b = g.param_var(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn column_stats(x: &Tensor<f32>) -> (Vec<f32>, Vec<f32>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            mean[j] += row[j] as f64;
            sq[j] += (row[j] as f64).powi(2);
        }
    }
    let mut m = Vec::with_capacity(d);
    let mut s = Vec::with_capacity(d);
    for j in 0..d {
        let mu = mean[j] / n as f64;
        m.push(mu as f32);
        s.push(((sq[j] / n as f64 - mu * mu).max(0.0).sqrt() as f32).max(1e-6));
    }
    (m, s)
}

/// Trains the whole encoder plus a fresh classifier (LN then a
/// zero-initialized affine layer) on mean-pooled tokens and reports held-out
/// top-1 accuracy.
pub fn finetune(bundle: &ModelBundle, dataset: &Dataset, cfg: &FinetuneConfig) -> Result<EvalReport> {
    check_labels(dataset)?;
    let mcfg = bundle.config;
    let d = mcfg.encoder.dim;
    let classes = dataset.num_classes;
    let norm = dataset.channel_stats();
    let (train, test) = split_indices(dataset.len(), cfg.holdout, cfg.seed)?;
    let grid = crate::patching::PatchGrid::for_image(dataset.height, dataset.width, mcfg.patch)?;
    let pos = sincos_pos_embed::<f32>(grid.h, grid.w, d)?;
    let patches_of = |i: usize| -> Result<Tensor<f32>> {
        let img = dataset.view(i, &Default::default(), 0, &norm)?;
        patchify(&ImageBatch::from_images(&[img])?, mcfg.patch)?.index_outer(0)
    };
    let mut params = bundle.encoder_params();
    params.insert("classifier.norm.gamma", Tensor::ones(&[d]));
    params.insert("classifier.norm.beta", Tensor::zeros(&[d]));
    params.insert("classifier.weight", Tensor::zeros(&[d, classes]));
    params.insert("classifier.bias", Tensor::zeros(&[classes]));
    let hyper = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = OptimState::new(&params, hyper, cfg.lr);
    let logits_for = |g: &mut Graph<f32>, p: Tensor<f32>| -> Result<crate::Var> {
        let x = embed_visible(g, "encoder", p, pos.clone())?;
        let z = encode(g, "encoder", &mcfg.encoder, x)?;
        let f = g.mean_rows(z)?;
        let gamma = g.param_var("classifier.norm.gamma")?;
        let beta = g.param_var("classifier.norm.beta")?;
        let f = g.layernorm(f, gamma, beta, LN_EPS)?;
        affine(g, "classifier", f)
    };
    let cached: Vec<Tensor<f32>> = (0..dataset.len()).map(patches_of).collect::<Result<_>>()?;
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Probe, epoch as u64 + 1, 1));
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut sum: Option<ParamStore<f32>> = None;
            for &i in batch {
                let mut g = Graph::new();
                g.register(&params)?;
                let l = logits_for(&mut g, cached[i].clone())?;
                let loss = g.cross_entropy(l, &[dataset.label(i)])?;
                let grads = g.backward(loss)?.into_store();
                match &mut sum {
                    None => sum = Some(grads),
                    Some(s) => {
                        for (name, t) in s.iter_mut() {
                            t.data_mut().iter_mut().zip(grads.get(name)?.data()).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            for (_, t) in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adamw_step(&mut params, &grads, &mut state, cfg.lr)?;
        }
    }
    let eval = |idx: &[usize]| -> Result<f64> {
        let mut rows = Vec::with_capacity(idx.len());
        for &i in idx {
            let mut g = Graph::new();
            g.register_frozen(&params)?;
            let l = logits_for(&mut g, cached[i].clone())?;
            rows.push(g.value(l).clone().reshape(vec![classes])?);
        }
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.label(i)).collect();
        Ok(accuracy(&Tensor::stack(&rows)?, &labels))
    };
    Ok(EvalReport {
        accuracy: eval(&test)?,
        train_accuracy: eval(&train)?,
        train_samples: train.len(),
        test_samples: test.len(),
    })
}
