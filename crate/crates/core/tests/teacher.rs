use std::process::Command;

use mimlab::archive::WeightArchive;
use mimlab::data::{AugmentConfig, Dataset, SyntheticConfig};
use mimlab::loss::{sample_loss, LossKind, SupervisionFlags};
use mimlab::masking::{random_mask, MaskSpec};
use mimlab::model::{forward_pipeline, ModelBundle, ModelConfig, ModelSize};
use mimlab::numerics::{Graph, ParamStore, Tensor};
use mimlab::patching::{ImageBatch, PatchGrid};
use mimlab::rng::{stream, Purpose};
use mimlab::teacher::{
    export_targets, load_targets, merge_targets, split_targets, teacher_targets, TargetCache, TargetSeq, Teacher,
    TeacherKind,
};
use mimlab::train::{pretrain, RunOptions, TrainConfig};
use mimlab::Error;
use rand::Rng;

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn synthetic(samples: usize) -> Dataset {
    Dataset::synthetic(&SyntheticConfig {
        samples,
        size: 16,
        ..Default::default()
    })
    .unwrap()
}

fn plain() -> AugmentConfig {
    AugmentConfig {
        enabled: false,
        ..Default::default()
    }
}

#[test]
fn pseudo_vit_targets_are_deterministic_and_standardized() {
    let data = synthetic(4);
    let norm = data.channel_stats();
    let img = ImageBatch::from_images(&[data.view(0, &plain(), 0, &norm).unwrap(), data.view(1, &plain(), 0, &norm).unwrap()])
        .unwrap();
    let a = teacher_targets(&img, &Teacher::pseudo_vit(ModelSize::Micro, 4, 7, true).unwrap()).unwrap();
    let b = teacher_targets(&img, &Teacher::pseudo_vit(ModelSize::Micro, 4, 7, true).unwrap()).unwrap();
    assert_eq!(bits(&a.targets), bits(&b.targets));
    assert_eq!(a.targets.shape(), &[2, 16, 64]);
    let d = a.dim();
    for row in a.targets.data().chunks(d) {
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn exported_targets_match_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_mimlab");
    for name in ["a.caet", "b.caet"] {
        let status = Command::new(exe)
            .args(["--seed", "3", "export-targets", "--no-augment", "--out"])
            .arg(dir.path().join(name))
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(dir.path().join("a.caet")).unwrap();
    let b = std::fs::read(dir.path().join("b.caet")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn loaded_micro_teacher_takes_its_width_from_the_archive() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.caet");
    let original = Teacher::pseudo_vit(ModelSize::Micro, 4, 1, true).unwrap();
    original.to_archive().write(&path).unwrap();
    let archive = WeightArchive::read(&path).unwrap();
    let width: usize = archive.meta_parse("dim").unwrap();
    let loaded = Teacher::build(&TeacherKind::Loaded { path: path.clone() }, 4, true).unwrap();
    assert_eq!(loaded.dim(), width);
    assert_eq!(loaded.dim(), 64);
    let data = synthetic(2);
    let img = data.view(0, &plain(), 0, &data.channel_stats()).unwrap();
    assert_eq!(bits(&loaded.features(&img).unwrap()), bits(&original.features(&img).unwrap()));
}

#[test]
fn split_uses_absolute_positions_and_merge_inverts_it() {
    let grid = PatchGrid::new(4, 4, 4).unwrap();
    let tagged: Vec<f32> = (0..2 * 16).flat_map(|i| [(i % 16) as f32, -1.0]).collect();
    let t = TargetSeq::new(Tensor::from_vec(vec![2, 16, 2], tagged).unwrap(), grid).unwrap();
    let masks: Vec<MaskSpec> = (0..2)
        .map(|b| random_mask(grid, 6, &mut stream(1, Purpose::Mask, 0, b)).unwrap())
        .collect();
    let (t_v, t_m) = split_targets(&t, &masks).unwrap();
    assert_eq!(t_v.shape(), &[2, 10, 2]);
    assert_eq!(t_m.shape(), &[2, 6, 2]);
    for (b, m) in masks.iter().enumerate() {
        let sv = t_v.index_outer(b).unwrap();
        let sm = t_m.index_outer(b).unwrap();
        for (i, &idx) in m.visible.iter().enumerate() {
            assert_eq!(sv.row(i)[0], idx as f32);
        }
        for (i, &idx) in m.masked.iter().enumerate() {
            assert_eq!(sm.row(i)[0], idx as f32);
        }
    }
    let back = merge_targets(&t_v, &t_m, &masks).unwrap();
    assert_eq!(bits(&back.targets), bits(&t.targets));
}

#[test]
fn export_then_load_is_bit_identical() {
    let data = synthetic(6);
    let teacher = Teacher::pseudo_vit(ModelSize::Micro, 4, 0, true).unwrap();
    let norm = data.channel_stats();
    let aug = AugmentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("targets.caet");
    let key = 0xfeed_beef_u64 | 1;
    export_targets(&data, &teacher, &aug, key, &norm, &path).unwrap();
    let samples = [4, 0, 2];
    let loaded = load_targets(&path, &samples).unwrap();
    for (k, &i) in samples.iter().enumerate() {
        let fresh = teacher.features(&data.view(i, &aug, key, &norm).unwrap()).unwrap();
        assert_eq!(bits(&loaded.sample(k).unwrap()), bits(&fresh));
    }
    let mut cache = TargetCache::new();
    cache.insert_archive(&WeightArchive::read(&path).unwrap()).unwrap();
    let hit = cache
        .get_or_compute(&data.id, 4, key, || -> mimlab::Result<Tensor<f32>> { panic!("should be cached") })
        .unwrap();
    assert_eq!(bits(&hit), bits(&loaded.sample(0).unwrap()));
}

#[test]
fn wrong_magic_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.caet");
    let teacher = Teacher::pseudo_vit(ModelSize::Micro, 4, 0, true).unwrap();
    let mut bytes = teacher.to_archive().to_bytes().unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(WeightArchive::read(&path), Err(Error::Format(_))));
    assert!(matches!(Teacher::load(&path, true), Err(Error::Format(_))));
    assert!(matches!(load_targets(&path, &[0]), Err(Error::Format(_))));
}

#[test]
fn second_epoch_hits_the_cache_when_augmentation_is_off() {
    let data = synthetic(24);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        augment: plain(),
        ..Default::default()
    };
    let teacher = Teacher::build(&cfg.teacher, 4, true).unwrap();
    let out = pretrain(&cfg, &data, &teacher, &RunOptions::default()).unwrap();
    assert_eq!(out.cache_misses, 24);
    assert_eq!(out.cache_hits, 24);
}

#[test]
fn no_gradient_reaches_the_teacher() {
    let teacher = Teacher::pseudo_vit(ModelSize::Micro, 4, 0, true).unwrap();
    let student = ModelBundle::init(ModelConfig::preset(ModelSize::Micro, 4, 64), 0).unwrap();
    let frozen = teacher.params().with_prefix("teacher.");
    let mut g = Graph::new();
    g.register(&student.params).unwrap();
    g.register_frozen(&frozen).unwrap();
    let data = synthetic(1);
    let img = ImageBatch::from_images(&[data.view(0, &plain(), 0, &data.channel_stats()).unwrap()]).unwrap();
    let grid = img.grid(4).unwrap();
    let mask = random_mask(grid, 8, &mut stream(0, Purpose::Mask, 0, 0)).unwrap();
    let out = forward_pipeline(&mut g, &student.config, &img, &[mask.clone()], SupervisionFlags::BOTH).unwrap()[0];
    // Targets computed on the same graph from a teacher weight.
    let w = g.param_var("teacher.encoder.blocks.0.mlp.fc2.weight").unwrap();
    let mut r = stream(0, Purpose::Data, 0, 0);
    let x: Vec<f32> = (0..16 * 256).map(|_| r.random_range(-1.0..1.0)).collect();
    let x = g.input(Tensor::from_vec(vec![16, 256], x).unwrap());
    let t = g.matmul(x, w).unwrap();
    let t_v = g.gather_rows(t, &mask.visible).unwrap();
    let t_m = g.gather_rows(t, &mask.masked).unwrap();
    let l = sample_loss(&mut g, Some((out.visible, t_v)), Some((out.masked.unwrap(), t_m)), SupervisionFlags::BOTH, LossKind::Cosine)
        .unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.iter().all(|(n, _)| !n.starts_with("teacher.")));
    assert!(grads.by_name("encoder.patch_embed.weight").is_some());
}

#[test]
fn archive_round_trips_every_preset_shape() {
    let mut store = ParamStore::new();
    let mut r = stream(0, Purpose::Data, 0, 0);
    for size in [ModelSize::Micro, ModelSize::Tiny, ModelSize::Small, ModelSize::Base, ModelSize::Large] {
        let cfg = ModelConfig::preset(size, 16, 768);
        let d = cfg.encoder.dim;
        let h = d * cfg.encoder.mlp_ratio;
        let shapes = [
            vec![cfg.patch_dim(), d],
            vec![d],
            vec![d, d],
            vec![d, h],
            vec![h],
            vec![h, d],
            vec![d, cfg.head.out_dim],
            vec![cfg.head.out_dim],
        ];
        for (k, s) in shapes.iter().enumerate() {
            let n: usize = s.iter().product();
            let data: Vec<f32> = (0..n).map(|_| f32::from_bits(r.random::<u32>() & 0xbf7f_ffff)).collect();
            store.insert(format!("{size}.{k}"), Tensor::from_vec(s.clone(), data).unwrap());
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shapes.caet");
    WeightArchive::from_store(store.clone()).write(&path).unwrap();
    let back = WeightArchive::read(&path).unwrap();
    assert_eq!(back.entries.len(), store.len());
    for (name, t) in store.iter() {
        let b = back.get(name).unwrap();
        assert_eq!(b.shape(), t.shape());
        assert_eq!(bits(b), bits(t), "{name}");
    }
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
}
