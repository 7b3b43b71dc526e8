use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segfuse_core::attention::AttentionParams;
use segfuse_core::labels::{Modality, SubRegion};
use segfuse_core::model::{Model, ModelConfig};
use segfuse_core::prompting::{combine_subregions, extract_bbox, segment_volume, SegmentOptions, Variant};
use segfuse_core::volume_io::MultiModalVolume;

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<u8> {
    let density: f64 = rng.random_range(0.02..0.1);
    let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
    let (r1, c1) = (rng.random_range(r0..h), rng.random_range(c0..w));
    Array2::from_shape_fn((h, w), |(r, c)| {
        if (r0..=r1).contains(&r) && (c0..=c1).contains(&c) && rng.random_bool(density) {
            [1u8, 2, 4][rng.random_range(0..3)]
        } else {
            0
        }
    })
}

fn region_pixels(mask: &Array2<u8>, label: u8) -> Vec<(usize, usize)> {
    mask.indexed_iter().filter(|(_, &v)| v == label).map(|(ix, _)| ix).collect()
}

#[test]
fn boxes_are_minimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for _ in 0..500 {
        let mask = random_labels(&mut rng, 24, 32);
        for r in SubRegion::ALL {
            let px = region_pixels(&mask, r.label());
            let p = extract_bbox(mask.view(), r.label(), 0).unwrap();
            assert_eq!(p.sub_region, r);
            let Some(b) = p.bbox else {
                assert!(px.is_empty());
                continue;
            };
            checked += 1;
            assert!(px.iter().all(|&(y, x)| b.contains(y, x)));
            // dropping any edge row or column loses a pixel exactly when
            // some region pixel lies on that edge
            assert!(px.iter().any(|&(y, _)| y == b.row_min), "{b:?}");
            assert!(px.iter().any(|&(y, _)| y == b.row_max), "{b:?}");
            assert!(px.iter().any(|&(_, x)| x == b.col_min), "{b:?}");
            assert!(px.iter().any(|&(_, x)| x == b.col_max), "{b:?}");
        }
    }
    assert!(checked > 300, "{checked}");
}

#[test]
fn margin_grows_and_clamps() {
    let mut m = Array2::<u8>::zeros((16, 16));
    for c in 2..=9 {
        m[[3, c]] = 4;
    }
    for r in 3..=7 {
        m[[r, 2]] = 4;
    }
    let b = extract_bbox(m.view(), 4, 0).unwrap().bbox.unwrap();
    assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (3, 2, 7, 9));
    let b = extract_bbox(m.view(), 4, 5).unwrap().bbox.unwrap();
    assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (0, 0, 12, 14));
    assert!(extract_bbox(m.view(), 3, 0).is_err());
}

/// Winner by the stated rule: the largest probability at or above `tau`,
/// ties going to ET, then NCR, then ED.
fn rule(ncr: f64, ed: f64, et: f64, tau: f64) -> u8 {
    let mut best = (f64::NEG_INFINITY, 0u8);
    for (p, label) in [(et, 4u8), (ncr, 1), (ed, 2)] {
        if p >= tau && p > best.0 {
            best = (p, label);
        }
    }
    best.1
}

#[test]
fn combination_follows_rule_on_grid() {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let n = grid.len().pow(3);
    let mut probs: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros((1, n)));
    let mut k = 0;
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                probs[0][[0, k]] = a;
                probs[1][[0, k]] = b;
                probs[2][[0, k]] = c;
                k += 1;
            }
        }
    }
    for tau in [0.5, 0.3, 0.7] {
        let labels = combine_subregions(&probs, tau).unwrap();
        for k in 0..n {
            let (a, b, c) = (probs[0][[0, k]], probs[1][[0, k]], probs[2][[0, k]]);
            let got = labels[[0, k]];
            assert_eq!(got, rule(a, b, c, tau), "probs ({a}, {b}, {c}) tau {tau}");
            if got != 0 {
                let idx = SubRegion::from_label(got).unwrap().index();
                assert!(probs[idx][[0, k]] >= tau);
            }
        }
    }
    let pixel = |ncr: f64, ed: f64, et: f64| [ncr, ed, et].map(|p| Array2::from_elem((1, 1), p));
    assert_eq!(combine_subregions(&pixel(0.9, 0.2, 0.4), 0.5).unwrap()[[0, 0]], 1);
    assert_eq!(combine_subregions(&pixel(0.7, 0.1, 0.7), 0.5).unwrap()[[0, 0]], 4);
    assert_eq!(combine_subregions(&pixel(0.5, 0.5, 0.49), 0.5).unwrap()[[0, 0]], 1);
    assert_eq!(combine_subregions(&pixel(0.49, 0.2, 0.1), 0.5).unwrap()[[0, 0]], 0);
}

fn blank_volume(d: usize, h: usize, w: usize) -> MultiModalVolume {
    MultiModalVolume::new(Array4::zeros((d, h, w, 4)), [1.0; 3], Modality::ORDER.to_vec()).unwrap()
}

#[test]
fn blank_volume_segments_without_error() {
    let model = Model::build(ModelConfig::desk(), 0).unwrap();
    let attn = AttentionParams::zeros(model.config().prompt_embed_dim);
    for variant in Variant::ALL {
        let opts = SegmentOptions { variant, ..SegmentOptions::default() };
        let out = segment_volume(&model, &attn, &blank_volume(3, 64, 64), &opts).unwrap();
        assert_eq!(out.mask.shape(), (3, 64, 64));
        assert!(out.mask.labels().iter().all(|v| [0, 1, 2, 4].contains(v)));
        assert_eq!(out.alphas.len(), if variant.attention { 3 } else { 0 });
    }
}

#[test]
fn segmentation_is_deterministic_at_any_size() {
    let model = Model::build(ModelConfig::desk(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = std::array::from_fn(|_| (0..32).map(|_| rng.random_range(-0.5..0.5)).collect());
    let attn = AttentionParams::from_values(w, [0.1, -0.2, 0.3]).unwrap();
    let data = Array4::from_shape_fn((2, 40, 48, 4), |_| rng.random_range(0.0..255.0));
    let vol = MultiModalVolume::new(data, [1.0; 3], Modality::ORDER.to_vec()).unwrap();
    let opts = SegmentOptions { tau: 0.4, refine_iters: 2, ..SegmentOptions::default() };
    let a = segment_volume(&model, &attn, &vol, &opts).unwrap();
    let b = segment_volume(&model, &attn, &vol, &opts).unwrap();
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.mask.shape(), (2, 40, 48));
    assert_eq!(a.alphas, b.alphas);
}

#[test]
fn unnormalized_volume_is_rejected() {
    let model = Model::build(ModelConfig::desk(), 0).unwrap();
    let attn = AttentionParams::zeros(32);
    let data = Array4::from_elem((1, 64, 64, 4), 300.0);
    let vol = MultiModalVolume::new(data, [1.0; 3], Modality::ORDER.to_vec()).unwrap();
    assert!(segment_volume(&model, &attn, &vol, &SegmentOptions::default()).is_err());
}
