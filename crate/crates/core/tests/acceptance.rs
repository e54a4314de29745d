//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use mimlab::archive::WeightArchive;
use mimlab::data::{Dataset, SyntheticConfig};
use mimlab::harness::{
    distillation_labels, pipeline_gradcheck, read_sweep, run_cell, run_sweep, Cell, PipelineCheck, ProbeConfig,
    SweepPlan, SWEEP_FILE,
};
use mimlab::loss::{total_loss, LossKind, SupervisionFlags};
use mimlab::masking::{default_ratio, sample_mask, target_mask_count, MaskSpec, SamplerKind};
use mimlab::model::{predict, ModelBundle, ModelConfig, ModelSize};
use mimlab::numerics::{finite_diff_check, Graph, ParamStore, ProbeMode, Tensor, Var};
use mimlab::patching::{ImageBatch, PatchGrid};
use mimlab::rng::{stream, Purpose};
use mimlab::teacher::Teacher;
use mimlab::train::{pretrain, RunOptions, TrainConfig, CHECKPOINT_FILE, METRICS_FILE};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn synthetic(samples: usize) -> Dataset {
    Dataset::synthetic(&SyntheticConfig {
        samples,
        size: 16,
        ..Default::default()
    })
    .expect("synthetic data")
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

// ---------------------------------------------------------------- 1

fn rand_f64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = stream(seed, Purpose::Data, 0, 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| r.random_range(-1.5..1.5)).collect()).unwrap()
}

const SMOOTH_L1_SEED: u64 = 4242;

type Prim = (&'static str, Vec<(&'static str, Vec<usize>)>, fn(&mut Graph<f64>) -> mimlab::Result<Var>);

fn pv(g: &Graph<f64>, n: &str) -> Var {
    g.param_var(n).expect("registered")
}

fn primitives() -> Vec<Prim> {
    vec![
        ("matmul", vec![("a", vec![3, 4]), ("b", vec![4, 2])], |g| {
            let (a, b) = (pv(g, "a"), pv(g, "b"));
            g.matmul(a, b)
        }),
        ("matmul_bt", vec![("a", vec![3, 4]), ("b", vec![5, 4])], |g| {
            let (a, b) = (pv(g, "a"), pv(g, "b"));
            g.matmul_bt(a, b)
        }),
        ("add", vec![("a", vec![3, 4]), ("b", vec![3, 4])], |g| {
            let (a, b) = (pv(g, "a"), pv(g, "b"));
            g.add(a, b)
        }),
        ("mul", vec![("a", vec![3, 4]), ("b", vec![3, 4])], |g| {
            let (a, b) = (pv(g, "a"), pv(g, "b"));
            g.mul(a, b)
        }),
        ("add_row", vec![("a", vec![3, 4]), ("b", vec![4])], |g| {
            let (a, b) = (pv(g, "a"), pv(g, "b"));
            g.add_row(a, b)
        }),
        ("scale", vec![("a", vec![3, 4])], |g| {
            let a = pv(g, "a");
            g.scale(a, 0.7)
        }),
        ("gelu", vec![("x", vec![3, 5])], |g| {
            let x = pv(g, "x");
            g.gelu(x)
        }),
        ("layernorm", vec![("x", vec![3, 5]), ("ga", vec![5]), ("be", vec![5])], |g| {
            let (x, a, b) = (pv(g, "x"), pv(g, "ga"), pv(g, "be"));
            g.layernorm(x, a, b, 1e-6)
        }),
        ("softmax", vec![("x", vec![3, 5])], |g| {
            let x = pv(g, "x");
            g.softmax_rows(x)
        }),
        ("slice_cols", vec![("x", vec![3, 5])], |g| {
            let x = pv(g, "x");
            g.slice_cols(x, 1, 3)
        }),
        ("concat_cols", vec![("x", vec![3, 5]), ("y", vec![3, 2])], |g| {
            let (x, y) = (pv(g, "x"), pv(g, "y"));
            g.concat_cols(&[x, y])
        }),
        ("concat_rows", vec![("x", vec![3, 5]), ("y", vec![2, 5])], |g| {
            let (x, y) = (pv(g, "x"), pv(g, "y"));
            g.concat_rows(&[x, y])
        }),
        ("gather_rows", vec![("x", vec![4, 3])], |g| {
            let x = pv(g, "x");
            g.gather_rows(x, &[2, 0, 2])
        }),
        ("broadcast_rows", vec![("x", vec![4])], |g| {
            let x = pv(g, "x");
            g.broadcast_rows(x, 3)
        }),
        ("mean_rows", vec![("x", vec![4, 3])], |g| {
            let x = pv(g, "x");
            g.mean_rows(x)
        }),
        ("sum", vec![("x", vec![4, 3])], |g| {
            let x = pv(g, "x");
            g.sum(x)
        }),
        ("mean", vec![("x", vec![4, 3])], |g| {
            let x = pv(g, "x");
            g.mean(x)
        }),
        ("cosine_distance", vec![("y", vec![3, 4]), ("t", vec![3, 4])], |g| {
            let (y, t) = (pv(g, "y"), pv(g, "t"));
            g.cosine_distance_rows(y, t, 1e-8)
        }),
        ("mse", vec![("y", vec![3, 4]), ("t", vec![3, 4])], |g| {
            let (y, t) = (pv(g, "y"), pv(g, "t"));
            g.mse_rows(y, t)
        }),
        ("smooth_l1", vec![("y", vec![3, 4])], |g| {
            // The target sits at fixed offsets from the stored input, clear
            // of the switch at 1.
            let y = pv(g, "y");
            let base = rand_f64(&[3, 4], SMOOTH_L1_SEED);
            let t: Vec<f64> = base.data().iter().enumerate().map(|(i, a)| a + [0.3, -0.4, 2.5, -3.1][i % 4]).collect();
            let t = g.input(Tensor::from_vec(vec![3, 4], t).unwrap());
            g.smooth_l1_rows(y, t, 1.0)
        }),
        ("cross_entropy", vec![("x", vec![3, 4])], |g| {
            let x = pv(g, "x");
            g.cross_entropy(x, &[1, 3, 0])
        }),
    ]
}

fn criterion_1() -> Outcome {
    let mut worst = 0.0f64;
    for (k, (name, shapes, f)) in primitives().into_iter().enumerate() {
        let mut store = ParamStore::new();
        for (j, (n, s)) in shapes.iter().enumerate() {
            let seed = if name == "smooth_l1" { SMOOTH_L1_SEED } else { (k * 10 + j) as u64 };
            store.insert(*n, rand_f64(s, seed));
        }
        let r = finite_diff_check(
            |g| {
                let y = f(g)?;
                if g.shape(y).is_empty() {
                    return Ok(y);
                }
                let shape = g.shape(y).to_vec();
                let w = g.input(rand_f64(&shape, 777));
                let p = g.mul(y, w)?;
                g.sum(p)
            },
            &store,
            1e-3,
            ProbeMode::Coordinates,
        )
        .map_err(e2s)?;
        ensure(r.max_rel_error < 1e-3, || format!("{name}: {} ({})", r.max_rel_error, r.worst))?;
        worst = worst.max(r.max_rel_error);
    }
    let check = PipelineCheck::default();
    for kind in LossKind::ALL {
        for flags in SupervisionFlags::ALL {
            let r = pipeline_gradcheck(&check, flags, kind).map_err(e2s)?;
            ensure(r.max_rel_error < 1e-3, || format!("pipeline {kind} {flags}: {}", r.max_rel_error))?;
            worst = worst.max(r.max_rel_error);
        }
    }
    Ok(format!("max rel error {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn oracle_patch(y: &[f64], t: &[f64], kind: LossKind) -> f64 {
    let d = y.len() as f64;
    match kind {
        LossKind::Cosine => {
            let (mut dot, mut a, mut b) = (0.0, 0.0, 0.0);
            for k in 0..y.len() {
                dot += y[k] * t[k];
                a += y[k] * y[k];
                b += t[k] * t[k];
            }
            1.0 - dot / (a.sqrt() * b.sqrt() + 1e-8)
        }
        LossKind::Mse => y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d,
        LossKind::SmoothL1 => {
            y.iter()
                .zip(t)
                .map(|(a, b)| {
                    let x = (a - b).abs();
                    if x < 1.0 {
                        0.5 * x * x
                    } else {
                        x - 0.5
                    }
                })
                .sum::<f64>()
                / d
        }
    }
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    let mut worst_alg = 0.0f64;
    for seed in 0..100u64 {
        let mut r = stream(seed, Purpose::Data, 11, 0);
        let b = r.random_range(1..=3usize);
        let n = r.random_range(2..=16usize);
        let nm = r.random_range(1..n);
        let nv = n - nm;
        let d = r.random_range(1..=8usize);
        let mut gen = |len: usize| -> Vec<f64> { (0..len).map(|_| r.random_range(-2.0..2.0)).collect() };
        let (yv, tv, ym, tm) = (gen(b * nv * d), gen(b * nv * d), gen(b * nm * d), gen(b * nm * d));
        let t3 = |v: &Vec<f64>, k: usize| Tensor::from_vec(vec![b, k, d], v.clone()).unwrap();
        let (tyv, ttv, tym, ttm) = (t3(&yv, nv), t3(&tv, nv), t3(&ym, nm), t3(&tm, nm));
        for kind in LossKind::ALL {
            let mut got = [0.0; 3];
            for (fi, flags) in SupervisionFlags::ALL.into_iter().enumerate() {
                let l = total_loss(Some(&tyv), Some(&ttv), Some(&tym), Some(&ttm), flags, kind).map_err(e2s)?;
                let (dv, dm) = (flags.delta_v() as f64, flags.delta_m() as f64);
                let mut want = 0.0;
                for s in 0..b {
                    let mut lv = 0.0;
                    for i in 0..nv {
                        let o = (s * nv + i) * d;
                        lv += oracle_patch(&yv[o..o + d], &tv[o..o + d], kind);
                    }
                    let mut lm = 0.0;
                    for i in 0..nm {
                        let o = (s * nm + i) * d;
                        lm += oracle_patch(&ym[o..o + d], &tm[o..o + d], kind);
                    }
                    want += (dv * lv + dm * lm) / (dv * nv as f64 + dm * nm as f64);
                }
                want /= b as f64;
                ensure((l - want).abs() < 1e-6, || format!("seed {seed} {kind} {flags}: {l} vs {want}"))?;
                worst = worst.max((l - want).abs());
                got[fi] = l;
            }
            // ALL is ordered visible, masked, both. Counts are equal across
            // the batch, so the identity also holds for batch means.
            let lhs = got[2] * (nv + nm) as f64;
            let rhs = got[0] * nv as f64 + got[1] * nm as f64;
            ensure((lhs - rhs).abs() < 1e-5, || format!("flag algebra seed {seed} {kind}: {lhs} vs {rhs}"))?;
            worst_alg = worst_alg.max((lhs - rhs).abs());
        }
    }
    Ok(format!("oracle max diff {worst:.1e}, flag algebra max diff {worst_alg:.1e}"))
}

// ---------------------------------------------------------------- 3

fn components(m: &MaskSpec) -> usize {
    let (h, w) = (m.grid.h, m.grid.w);
    let mut f = m.flags();
    let mut count = 0;
    for s in 0..f.len() {
        if !f[s] {
            continue;
        }
        count += 1;
        f[s] = false;
        let mut stack = vec![s];
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut nb = vec![];
            if r > 0 {
                nb.push(i - w);
            }
            if r + 1 < h {
                nb.push(i + w);
            }
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < w {
                nb.push(i + 1);
            }
            for j in nb {
                if f[j] {
                    f[j] = false;
                    stack.push(j);
                }
            }
        }
    }
    count
}

fn criterion_3() -> Outcome {
    for kind in [SamplerKind::Random, SamplerKind::Blockwise] {
        for s in 0..10_000u64 {
            let mut r = stream(s, Purpose::Mask, 1, 0);
            let grid = PatchGrid::new(r.random_range(1..=14), r.random_range(1..=14), 16).unwrap();
            let n = grid.num_patches();
            let count = target_mask_count(n, r.random_range(0.0..=1.0)).map_err(e2s)?;
            let m = sample_mask(kind, grid, count, &mut r).map_err(e2s)?;
            ensure(m.masked.len() == count, || format!("{kind} seed {s}: count {}", m.masked.len()))?;
            let mut seen = vec![0u8; n];
            for &i in m.visible.iter().chain(&m.masked) {
                seen[i] += 1;
            }
            ensure(seen.iter().all(|&c| c == 1), || format!("{kind} seed {s}: not a partition"))?;
        }
    }
    let grid = PatchGrid::new(14, 14, 16).unwrap();
    let count = target_mask_count(196, 0.5).map_err(e2s)?;
    let (mut cr, mut cb) = (0usize, 0usize);
    for s in 0..10_000u64 {
        cr += components(&sample_mask(SamplerKind::Random, grid, count, &mut stream(s, Purpose::Mask, 0, 0)).map_err(e2s)?);
        cb += components(&sample_mask(SamplerKind::Blockwise, grid, count, &mut stream(s, Purpose::Mask, 0, 0)).map_err(e2s)?);
    }
    let (mr, mb) = (cr as f64 / 1e4, cb as f64 / 1e4);
    ensure(mb < mr, || format!("blockwise {mb} vs random {mr} components"))?;
    let table: Vec<f64> = [ModelSize::Tiny, ModelSize::Small, ModelSize::Base, ModelSize::Large]
        .iter()
        .map(|&s| default_ratio(s))
        .collect::<mimlab::Result<_>>()
        .map_err(e2s)?;
    ensure(table == [0.15, 0.25, 0.50, 0.50], || format!("default ratios {table:?}"))?;
    Ok(format!("mean components blockwise {mb:.2} < random {mr:.2}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut bundle = ModelBundle::init(ModelConfig::preset(ModelSize::Micro, 4, 64), 3).map_err(e2s)?;
    let mut r = stream(1, Purpose::Data, 0, 0);
    for (_, t) in bundle.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
    }
    let d = synthetic(4);
    let norm = d.channel_stats();
    let views: Vec<Tensor<f32>> = (0..4).map(|i| d.view(i, &Default::default(), 0, &norm).unwrap()).collect();
    let img = ImageBatch::from_images(&views).map_err(e2s)?;
    let grid = img.grid(4).map_err(e2s)?;
    let mut trials = 0;
    for trial in 0..20u64 {
        let masks: Vec<MaskSpec> = (0..4)
            .map(|b| sample_mask(SamplerKind::Blockwise, grid, 8, &mut stream(trial, Purpose::Mask, 0, b)).unwrap())
            .collect();
        let mut noisy = img.tensor().clone();
        for (b, m) in masks.iter().enumerate() {
            for &i in &m.masked {
                let (pr, pc) = grid.coords(i);
                for c in 0..3 {
                    for y in pr * 4..pr * 4 + 4 {
                        for x in pc * 4..pc * 4 + 4 {
                            noisy.data_mut()[((b * 3 + c) * 16 + y) * 16 + x] = r.random_range(-10.0..10.0);
                        }
                    }
                }
            }
        }
        let noisy = ImageBatch::new(noisy).map_err(e2s)?;
        for flags in SupervisionFlags::ALL {
            let a = predict(&bundle, &img, &masks, flags).map_err(e2s)?;
            let b = predict(&bundle, &noisy, &masks, flags).map_err(e2s)?;
            ensure(bits(&a.visible) == bits(&b.visible), || format!("trial {trial} {flags}: Y_v changed"))?;
            trials += 1;
        }
    }

    let data = synthetic(64);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr_peak: Some(1e-3),
        flags: SupervisionFlags::VISIBLE,
        ..Default::default()
    };
    let teacher = Teacher::build(&cfg.teacher, 4, true).map_err(e2s)?;
    let out = pretrain(&cfg, &data, &teacher, &RunOptions::default()).map_err(e2s)?;
    let init = ModelBundle::init(out.bundle.config, cfg.seed).map_err(e2s)?;
    let mut decoder = 0;
    for (name, t) in out.bundle.params.iter().filter(|(n, _)| n.starts_with("decoder.")) {
        let before = init.params.get(name).map_err(e2s)?;
        ensure(bits(t) == bits(before), || format!("{name} changed during a visible-only run"))?;
        decoder += 1;
    }
    ensure(out.bundle.params.get("encoder.patch_embed.weight").unwrap() != init.params.get("encoder.patch_embed.weight").unwrap(), || {
        "encoder did not train".into()
    })?;
    Ok(format!("{trials} masked-pixel trials bit-identical; {decoder} decoder tensors unchanged"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let data = synthetic(48);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 16,
        lr_peak: Some(1e-3),
        ..Default::default()
    };
    let teacher = Teacher::build(&cfg.teacher, 4, true).map_err(e2s)?;
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let dir = |n: &str| tmp.path().join(n);
    let opts = |p: &Path| RunOptions {
        out_dir: Some(p.to_path_buf()),
        ..Default::default()
    };
    let a = pretrain(&cfg, &data, &teacher, &opts(&dir("a"))).map_err(e2s)?;
    pretrain(&cfg, &data, &teacher, &opts(&dir("b"))).map_err(e2s)?;
    let csv_a = std::fs::read(dir("a").join(METRICS_FILE)).map_err(e2s)?;
    let csv_b = std::fs::read(dir("b").join(METRICS_FILE)).map_err(e2s)?;
    ensure(csv_a == csv_b, || "metrics CSVs differ between identical runs".into())?;

    pretrain(
        &cfg,
        &data,
        &teacher,
        &RunOptions {
            stop_after_epoch: Some(2),
            ..opts(&dir("c"))
        },
    )
    .map_err(e2s)?;
    let resumed = pretrain(
        &cfg,
        &data,
        &teacher,
        &RunOptions {
            resume_from: Some(dir("c").join(CHECKPOINT_FILE)),
            ..opts(&dir("c"))
        },
    )
    .map_err(e2s)?;
    let csv_c = std::fs::read(dir("c").join(METRICS_FILE)).map_err(e2s)?;
    ensure(csv_c == csv_a, || {
        format!(
            "resumed metrics differ from the uninterrupted run:\n{}\n{}",
            String::from_utf8_lossy(&csv_a),
            String::from_utf8_lossy(&csv_c)
        )
    })?;
    ensure(resumed.bundle == a.bundle, || "resumed weights differ".into())?;

    let mut checked = 0;
    for path in [dir("a").join(CHECKPOINT_FILE), dir("c").join(CHECKPOINT_FILE)] {
        let bytes = std::fs::read(&path).map_err(e2s)?;
        let arch = WeightArchive::from_bytes(&bytes).map_err(e2s)?;
        ensure(arch.to_bytes().map_err(e2s)? == bytes, || format!("{} does not re-encode identically", path.display()))?;
        let copy = dir("copy.caet");
        arch.write(&copy).map_err(e2s)?;
        let back = WeightArchive::read(&copy).map_err(e2s)?;
        for (name, t) in arch.entries.iter() {
            ensure(bits(back.get(name).map_err(e2s)?) == bits(t), || format!("{name} changed in round trip"))?;
            checked += 1;
        }
    }
    let t_arch = teacher.to_archive();
    let back = WeightArchive::from_bytes(&t_arch.to_bytes().map_err(e2s)?).map_err(e2s)?;
    ensure(back.entries == t_arch.entries, || "teacher archive round trip differs".into())?;
    Ok(format!("{} metric rows identical, resume bit-exact, {checked} archive entries round-tripped", a.metrics.len()))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let data = synthetic(256);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr_peak: Some(1e-3),
        warmup_epochs: Some(0),
        flags: SupervisionFlags::VISIBLE,
        ..Default::default()
    };
    let teacher = Teacher::build(&cfg.teacher, 4, true).map_err(e2s)?;
    let out = pretrain(&cfg, &data, &teacher, &RunOptions::default()).map_err(e2s)?;
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
    let (first, last) = (losses[0], losses[losses.len() - 1]);
    ensure(last < 0.5 * first, || format!("epoch losses {losses:?}"))?;
    Ok(format!("epoch losses {:?}, ratio {:.3}", losses.iter().map(|l| format!("{l:.4}")).collect::<Vec<_>>(), last / first))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let base = TrainConfig {
        batch_size: 16,
        lr_peak: Some(1e-3),
        gamma: 0.5,
        ..Default::default()
    };
    let teacher = Teacher::build(&base.teacher, base.patch, base.normalize_targets).map_err(e2s)?;
    let data = distillation_labels(&synthetic(512), &teacher, 2, 0).map_err(e2s)?;
    let plan = SweepPlan {
        epochs: 5,
        ..Default::default()
    };
    let mut means = Vec::new();
    for flags in SupervisionFlags::ALL {
        let mut accs = Vec::new();
        for seed in 0..3 {
            let cell = Cell {
                model: base.model,
                gamma: base.gamma,
                flags,
                loss: base.loss,
                sampler: base.sampler,
                seed,
            };
            let probe = ProbeConfig {
                seed,
                ..Default::default()
            };
            let (_, acc) = run_cell(&cell, &plan, &base, &probe, &data, None).map_err(e2s)?;
            accs.push(acc);
        }
        means.push((flags, accs.iter().sum::<f64>() / accs.len() as f64));
    }
    let mean_of = |f: SupervisionFlags| means.iter().find(|(g, _)| *g == f).map(|(_, a)| *a).unwrap();
    let masked_only = mean_of(SupervisionFlags::MASKED);
    let summary = means.iter().map(|(f, a)| format!("({f}) {a:.3}")).collect::<Vec<_>>().join(", ");
    for f in [SupervisionFlags::VISIBLE, SupervisionFlags::BOTH] {
        ensure(mean_of(f) >= masked_only, || format!("ordering violated: {summary}"))?;
    }
    Ok(format!("mean probe accuracy {summary}"))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let data = synthetic(256);
    let base = TrainConfig {
        batch_size: 16,
        lr_peak: Some(1e-3),
        ..Default::default()
    };
    let plan = SweepPlan {
        models: vec![ModelSize::Micro],
        gammas: vec![0.15, 0.5, 0.9],
        seeds: vec![0, 1],
        epochs: 3,
        ..Default::default()
    };
    let probe = ProbeConfig::default();
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let report = run_sweep(&plan, &base, &probe, &data, tmp.path()).map_err(e2s)?;
    let path = tmp.path().join(SWEEP_FILE);
    let bytes = std::fs::read(&path).map_err(e2s)?;
    let text = String::from_utf8(bytes.clone()).map_err(e2s)?;
    let lines: Vec<&str> = text.lines().collect();
    ensure(
        lines[0] == "model,gamma,delta_v,delta_m,loss_kind,sampler,seed,final_pretrain_loss,probe_acc,status",
        || format!("header {}", lines[0]),
    )?;
    ensure(lines.len() == 7 && report.written == 6, || format!("{} data rows", lines.len() - 1))?;
    let rows = read_sweep(&path).map_err(e2s)?;
    for (row, cell) in rows.iter().zip(plan.cells()) {
        ensure(
            row.status == "ok"
                && row.model == cell.model
                && row.gamma == cell.gamma
                && row.seed == cell.seed
                && row.final_pretrain_loss.is_finite()
                && (0.0..=1.0).contains(&row.probe_acc),
            || format!("malformed row {row:?}"),
        )?;
    }
    let again = run_sweep(&plan, &base, &probe, &data, tmp.path()).map_err(e2s)?;
    ensure(again.written == 0 && again.skipped == 6, || format!("rerun {again:?}"))?;
    ensure(std::fs::read(&path).map_err(e2s)? == bytes, || "rerun changed the CSV".into())?;
    Ok("6 rows written, rerun added 0".into())
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 8] = [
        ("gradient suite", criterion_1, Some(Duration::from_secs(120))),
        ("loss oracle and flag algebra", criterion_2, None),
        ("masking suite", criterion_3, None),
        ("construction guarantees", criterion_4, None),
        ("determinism and persistence", criterion_5, None),
        ("learnability", criterion_6, Some(Duration::from_secs(300))),
        ("supervision-position ordering", criterion_7, None),
        ("sweep harness", criterion_8, Some(Duration::from_secs(1800))),
    ];
    // Optional criterion numbers on the command line select a subset.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let took = t0.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if took > *l => Err(format!("took {took:.1?}, limit {l:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}; {took:.1?})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail}; {took:.1?})", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
