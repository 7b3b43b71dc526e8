use std::collections::HashSet;

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segfuse_autograd::{Adam, Graph, Tensor};
use segfuse_core::attention::AttentionParams;
use segfuse_core::labels::SubRegion;
use segfuse_core::model::{Model, ModelConfig};
use segfuse_core::phantom::{generate_dataset, PhantomRanges, PhantomSpec};
use segfuse_core::prompting::{extract_bbox, resize_labels, resize_slice, Variant};
use segfuse_core::training::{
    apply_augment, augment, combined_loss, combined_loss_graph, cosine_lr, epoch_targets, iou_loss,
    sample_step, sample_subregion_target, train, AugmentConfig, AugmentDraw, PromptSource, TrainConfig,
};
use segfuse_core::volume_io::CaseArchive;

fn grid(h: usize, w: usize, rng: &mut ChaCha8Rng, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(-scale..scale))
}

#[test]
fn combined_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..100 {
        let logits = grid(8, 8, &mut rng, 4.0);
        let density = [0.0, 0.1, 0.5, 1.0][case % 4];
        let target = Array2::from_shape_fn((8, 8), |_| f64::from(u8::from(rng.random_bool(density))));
        let (ls, li) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[8, 8], logits.iter().copied().collect()));
        let t = Tensor::new(&[8, 8], target.iter().copied().collect());
        let loss = combined_loss_graph(&mut g, x, &t, ls, li);
        let direct = combined_loss(logits.view(), target.view(), ls, li).unwrap();
        assert!((g.value(loss.total).item() - direct).abs() < 1e-12);
        let grads = g.backward(loss.total);
        let an = grads.get(x).unwrap().data().to_vec();
        let h = 1e-6;
        for (i, a) in an.iter().enumerate() {
            let mut plus = logits.clone();
            let mut minus = logits.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            minus.as_slice_mut().unwrap()[i] -= h;
            let fd = (combined_loss(plus.view(), target.view(), ls, li).unwrap()
                - combined_loss(minus.view(), target.view(), ls, li).unwrap())
                / (2.0 * h);
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err <= 1e-4 || (fd - a).abs() < 1e-10, "case {case} pixel {i}: {a} vs {fd}");
        }
    }
}

#[test]
fn loss_examples() {
    let z = Array2::zeros((1, 1));
    let one = Array2::from_elem((1, 1), 1.0);
    assert!((iou_loss(z.view(), one.view()).unwrap() - 0.2).abs() < 1e-15);
    let both = combined_loss(z.view(), one.view(), 1.0, 1.0).unwrap();
    assert!((both - (2f64.ln() + 0.2)).abs() < 1e-15);
    assert!((both - 0.893147).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = grid(6, 6, &mut rng, 3.0);
    let target = Array2::from_shape_fn((6, 6), |(r, _)| f64::from(u8::from(r < 3)));
    let ce = combined_loss(logits.view(), target.view(), 1.0, 0.0).unwrap();
    let dl = combined_loss(logits.view(), target.view(), 0.0, 1.0).unwrap();
    assert!(ce > 0.0 && dl > 0.0);
    assert!(combined_loss(logits.view(), target.view(), -1.0, 1.0).is_err());
    let saturated = target.mapv(|t| if t > 0.5 { 40.0 } else { -40.0 });
    assert!(combined_loss(saturated.view(), target.view(), 1.0, 1.0).unwrap() < 1e-12);
}

proptest! {
    #[test]
    fn cosine_never_increases(total in 1usize..5000, a in 0.0f64..1.0, b in 0.0f64..1.0, base in 1e-6f64..1.0) {
        let (s, t) = ((a * total as f64) as usize, (b * total as f64) as usize);
        let (lo, hi) = (s.min(t), s.max(t));
        prop_assert!(cosine_lr(hi, total, base).unwrap() <= cosine_lr(lo, total, base).unwrap());
        prop_assert!(cosine_lr(total, total, base).unwrap().abs() < 1e-15 * base.max(1.0));
    }

    #[test]
    fn augmentation_is_seeded_and_keeps_labels(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slice = Array3::from_shape_fn((20, 20, 2), |_| rng.random_range(0.0..255.0));
        let mask = Array2::from_shape_fn((20, 20), |_| [0u8, 2, 4][rng.random_range(0..3)]);
        let cfg = AugmentConfig::default();
        let a = augment(slice.view(), mask.view(), &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        let b = augment(slice.view(), mask.view(), &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        let before: HashSet<u8> = mask.iter().copied().collect();
        prop_assert!(a.1.iter().all(|v| *v == 0 || before.contains(v)));
        prop_assert!(a.0.iter().all(|v| (0.0..=255.0).contains(v)));
    }
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_lr(0, 100, 3e-5).unwrap(), 3e-5);
    assert!((cosine_lr(50, 100, 3e-5).unwrap() - 1.5e-5).abs() < 1e-18);
    assert!(cosine_lr(101, 100, 3e-5).is_err());
}

#[test]
fn identity_draw_leaves_slice_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let slice = Array3::from_shape_fn((9, 11, 3), |_| rng.random_range(0.0..255.0));
    let mask = Array2::from_shape_fn((9, 11), |_| [0u8, 1, 2, 4][rng.random_range(0..4)]);
    let (img, labels) = apply_augment(slice.view(), mask.view(), &AugmentDraw::identity(3)).unwrap();
    assert_eq!(img, slice);
    assert_eq!(labels, mask);
    let none = augment(slice.view(), mask.view(), &mut rng, &AugmentConfig::none()).unwrap();
    assert_eq!(none, (slice, mask));
}

#[test]
fn small_rotation_keeps_disk_area() {
    let n = 64;
    let c = (n as f64 - 1.0) / 2.0;
    let mask = Array2::from_shape_fn((n, n), |(r, col)| {
        u8::from((r as f64 - c).powi(2) + (col as f64 - c).powi(2) <= 20.0 * 20.0) * 2
    });
    let slice = Array3::zeros((n, n, 1));
    let draw = AugmentDraw {
        angle_deg: 10.0,
        scale: 1.0,
        jitter: vec![1.0],
    };
    let (_, rotated) = apply_augment(slice.view(), mask.view(), &draw).unwrap();
    let area = |m: &Array2<u8>| m.iter().filter(|&&v| v == 2).count() as f64;
    let ratio = area(&rotated) / area(&mask);
    assert!((ratio - 1.0).abs() <= 0.05, "{ratio}");
}

#[test]
fn target_sampling_is_uniform_over_present_regions() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut gt = Array2::<u8>::zeros((6, 6));
    gt[[0, 0]] = 1;
    gt[[1, 1]] = 2;
    gt[[2, 2]] = 4;
    let mut counts = [0usize; 3];
    let draws = 30_000;
    for _ in 0..draws {
        let (r, mask) = sample_subregion_target(gt.view(), &mut rng);
        assert_eq!(mask.iter().filter(|&&v| v == 1.0).count(), 1);
        counts[r.index()] += 1;
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 1.0 / 3.0).abs() <= 0.01, "{counts:?}");
    }
    let only_ed = Array2::from_shape_fn((4, 4), |(r, _)| if r == 0 { 2u8 } else { 0 });
    for _ in 0..50 {
        let (r, mask) = sample_subregion_target(only_ed.view(), &mut rng);
        assert_eq!(r, SubRegion::Ed);
        assert_eq!(mask, only_ed.mapv(|v| f64::from(u8::from(v == 2))));
    }
    let empty = Array2::<u8>::zeros((4, 4));
    let mut seen = HashSet::new();
    for _ in 0..100 {
        let (r, mask) = sample_subregion_target(empty.view(), &mut rng);
        assert!(mask.iter().all(|&v| v == 0.0));
        seen.insert(r);
    }
    assert_eq!(seen.len(), 3);
}

fn small_cases(n: usize, seed: u64) -> Vec<CaseArchive> {
    let base = PhantomSpec {
        size: (12, 32, 32),
        tumor_center: (5.5, 15.5, 15.5),
        radii: (5.0, 3.5, 2.0),
        ..PhantomSpec::default()
    };
    generate_dataset(n, &base, &PhantomRanges::none(0.0), seed).unwrap()
}

#[test]
fn every_present_region_is_targeted_each_epoch() {
    let cases = small_cases(3, 0);
    let present: HashSet<u8> = cases.iter().flat_map(|c| c.gts.iter().copied()).filter(|&v| v != 0).collect();
    for seed in [0, 3] {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        for epoch in 0..3 {
            let targets = epoch_targets(&cases, &cfg, epoch, (64, 64)).unwrap();
            let seen: HashSet<u8> = targets.iter().map(|r| r.label()).collect();
            assert_eq!(seen, present, "seed {seed} epoch {epoch}");
        }
    }
}

#[test]
fn short_run_records_every_epoch() {
    let cases = small_cases(3, 1);
    let mut model = Model::build(ModelConfig::desk(), 0).unwrap();
    let mut attn = AttentionParams::zeros(32);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::desk()
    };
    let mut calls = 0;
    let hist = train(&mut model, &mut attn, &cases, &cases[..1], &cfg, Variant::FULL, |p| {
        calls += 1;
        assert_eq!(p.epochs, 2);
    })
    .unwrap();
    assert_eq!(calls, 2);
    assert_eq!(hist.records.len(), 2);
    let last = hist.records.last().unwrap();
    let expected = cosine_lr(hist.total_updates - 1, hist.total_updates - 1, cfg.base_lr).unwrap();
    assert_eq!(last.lr, expected);
    assert!(last.dice.iter().all(|d| (0.0..=1.0).contains(d)));
    assert!(hist.records.iter().all(|r| r.loss_ce.is_finite() && r.loss_iou.is_finite()));

    let mut again = Model::build(ModelConfig::desk(), 0).unwrap();
    let mut attn2 = AttentionParams::zeros(32);
    let hist2 = train(&mut again, &mut attn2, &cases, &cases[..1], &cfg, Variant::FULL, |_| {}).unwrap();
    assert_eq!(hist, hist2);
    assert!(model.store().same_values(again.store()));
    assert!(train(&mut again, &mut attn2, &[], &[], &cfg, Variant::FULL, |_| {}).is_err());
}

/// Adam on one fixed pair of slices, each with a fixed target and box.
fn fixed_batch_losses(seed: u64, steps: usize) -> Vec<f64> {
    let case = &small_cases(1, 7)[0];
    let mut model = Model::build(ModelConfig::desk(), seed).unwrap();
    let mut attn = AttentionParams::zeros(32);
    let cfg = TrainConfig::desk();
    let batch: Vec<_> = [(4usize, SubRegion::Ed), (5, SubRegion::Et)]
        .into_iter()
        .map(|(z, region)| {
            let img = case.imgs.index_axis(ndarray::Axis(0), z).mapv(f64::from);
            let chw = Tensor::new(&[4, 32, 32], img.view().permuted_axes([2, 0, 1]).iter().copied().collect());
            let labels = resize_labels(case.gts.index_axis(ndarray::Axis(0), z), 64, 64);
            let target = Tensor::new(&[64, 64], labels.iter().map(|&v| f64::from(u8::from(v == region.label()))).collect());
            let bbox = extract_bbox(labels.view(), region.label(), 0).unwrap().bbox;
            (resize_slice(&chw, 64, 64), region, target, bbox)
        })
        .collect();
    let mut mopt = Adam::new(model.store());
    let mut aopt = Adam::new(attn.store());
    let mut losses = Vec::new();
    for _ in 0..=steps {
        let mut total = 0.0;
        let mut mg: Vec<Option<Tensor>> = vec![None; model.store().len()];
        let mut ag: Vec<Option<Tensor>> = vec![None; attn.store().len()];
        for (slice, region, target, bbox) in &batch {
            let step = sample_step(&model, &attn, slice, *region, target, PromptSource::Given(*bbox), Variant::FULL, &cfg)
                .unwrap();
            total += step.loss / batch.len() as f64;
            for (acc, g) in mg.iter_mut().zip(step.model_grads).chain(ag.iter_mut().zip(step.attention_grads)) {
                if let Some(mut g) = g {
                    g.scale_assign(0.5);
                    match acc {
                        Some(t) => t.add_assign(&g),
                        None => *acc = Some(g),
                    }
                }
            }
        }
        losses.push(total);
        mopt.step(model.store_mut(), &mg, cfg.base_lr);
        aopt.step(attn.store_mut(), &ag, cfg.base_lr);
    }
    losses
}

#[test]
fn fixed_batch_loss_falls_in_most_seeds() {
    let mut falling = 0;
    for seed in 0..5 {
        let l = fixed_batch_losses(seed, 50);
        let decreasing = l[50] < l[0] && l[40..].iter().sum::<f64>() < l[..10].iter().sum::<f64>();
        eprintln!("seed {seed}: loss {:.4} -> {:.4}", l[0], l[50]);
        falling += usize::from(decreasing);
    }
    assert!(falling >= 4, "loss fell in {falling} of 5 seeds");
}
