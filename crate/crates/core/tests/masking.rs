use mimlab::masking::{
    blockwise_mask, default_ratio, random_mask, sample_mask, target_mask_count, MaskSpec, SamplerKind,
};
use mimlab::model::ModelSize;
use mimlab::patching::PatchGrid;
use mimlab::rng::{stream, Purpose};
use proptest::prelude::*;
use rand::Rng;

fn check_invariants(m: &MaskSpec, count: usize) {
    let n = m.grid.num_patches();
    assert_eq!(m.masked.len(), count);
    assert_eq!(m.visible.len() + m.masked.len(), n);
    assert!(m.visible.windows(2).all(|w| w[0] < w[1]));
    assert!(m.masked.windows(2).all(|w| w[0] < w[1]));
    let mut seen = vec![0u8; n];
    for &i in m.visible.iter().chain(&m.masked) {
        seen[i] += 1;
    }
    assert!(seen.iter().all(|&c| c == 1), "not a partition");
    assert_eq!(m.gamma(), count as f64 / n as f64);
}

/// Number of 4-connected components among masked cells.
fn components(m: &MaskSpec) -> usize {
    let (h, w) = (m.grid.h, m.grid.w);
    let mut flags = m.flags();
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..flags.len() {
        if !flags[start] {
            continue;
        }
        count += 1;
        flags[start] = false;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut nb = Vec::with_capacity(4);
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
                if flags[j] {
                    flags[j] = false;
                    stack.push(j);
                }
            }
        }
    }
    count
}

#[test]
fn invariants_hold_over_10k_draws_per_sampler() {
    for kind in [SamplerKind::Random, SamplerKind::Blockwise] {
        for s in 0..10_000u64 {
            let mut r = stream(s, Purpose::Mask, 0, 0);
            let h = r.random_range(1..=14);
            let w = r.random_range(1..=14);
            let grid = PatchGrid::new(h, w, 4).unwrap();
            let gamma: f64 = r.random_range(0.0..=1.0);
            let count = target_mask_count(grid.num_patches(), gamma).unwrap();
            let m = sample_mask(kind, grid, count, &mut r).unwrap();
            check_invariants(&m, count);
        }
    }
}

#[test]
fn blockwise_masks_are_more_contiguous_than_random() {
    let grid = PatchGrid::new(14, 14, 16).unwrap();
    let count = target_mask_count(196, 0.5).unwrap();
    let (mut rand_total, mut block_total) = (0usize, 0usize);
    for s in 0..10_000u64 {
        rand_total += components(&random_mask(grid, count, &mut stream(s, Purpose::Mask, 0, 0)).unwrap());
        block_total += components(&blockwise_mask(grid, count, &mut stream(s, Purpose::Mask, 0, 1)).unwrap());
    }
    assert!(block_total < rand_total, "blockwise {block_total} vs random {rand_total}");
}

#[test]
fn random_mask_marginals_are_uniform() {
    let grid = PatchGrid::new(4, 4, 4).unwrap();
    let draws = 100_000u64;
    let mut freq = [0u64; 16];
    let mut r = stream(3, Purpose::Mask, 0, 0);
    for _ in 0..draws {
        for i in random_mask(grid, 8, &mut r).unwrap().masked {
            freq[i] += 1;
        }
    }
    for f in freq {
        let p = f as f64 / draws as f64;
        assert!((p - 0.5).abs() < 0.02, "{p}");
    }
}

#[test]
fn same_stream_key_gives_same_mask() {
    let grid = PatchGrid::new(14, 14, 16).unwrap();
    for kind in [SamplerKind::Random, SamplerKind::Blockwise] {
        for i in 0..50 {
            let a = sample_mask(kind, grid, 98, &mut stream(9, Purpose::Mask, 2, i)).unwrap();
            let b = sample_mask(kind, grid, 98, &mut stream(9, Purpose::Mask, 2, i)).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn default_ratio_table() {
    let got: Vec<f64> = [ModelSize::Tiny, ModelSize::Small, ModelSize::Base, ModelSize::Large]
        .iter()
        .map(|&s| default_ratio(s).unwrap())
        .collect();
    assert_eq!(got, vec![0.15, 0.25, 0.50, 0.50]);
}

proptest! {
    #[test]
    fn every_sampler_partitions_exactly(h in 1usize..16, w in 1usize..16, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let grid = PatchGrid::new(h, w, 2).unwrap();
        let count = target_mask_count(grid.num_patches(), frac).unwrap();
        for kind in [SamplerKind::Random, SamplerKind::Blockwise] {
            let m = sample_mask(kind, grid, count, &mut stream(seed, Purpose::Mask, 0, 0)).unwrap();
            check_invariants(&m, count);
        }
    }

    #[test]
    fn mask_count_is_round_half_up(n in 1usize..1000, frac in 0.0f64..=1.0) {
        let c = target_mask_count(n, frac).unwrap();
        prop_assert!(c <= n);
        prop_assert!((c as f64 - frac * n as f64).abs() <= 0.5 + 1e-9);
    }
}
