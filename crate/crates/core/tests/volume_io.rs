use std::fs::File;

use ndarray::{Array1, Array3, Array4};
use ndarray_npy::NpzWriter;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segfuse_core::volume_io::{
    clip_percentiles, crop_to_labeled_roi, load_case, minmax_normalize, normalize_modality, save_case, CaseArchive,
    MultiModalVolume, SegmentationMask,
};
use segfuse_core::labels::Modality;
use segfuse_core::Error;

/// Sort-and-interpolate percentile written out independently of the crate.
fn oracle_percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = pct / 100.0 * (v.len() as f64 - 1.0);
    let below = pos.floor();
    let i = below as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (pos - below)) + v[i + 1] * (pos - below)
}

#[test]
fn clipping_matches_percentile_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..100 {
        let dims = (rng.random_range(1..6), rng.random_range(1..12), rng.random_range(1..12));
        let vol = Array3::from_shape_fn(dims, |_| {
            if i % 3 == 0 {
                f64::from(rng.random_range(0..20))
            } else {
                rng.random_range(-500.0..3000.0)
            }
        });
        let (lo, hi) = [(0.5, 99.5), (0.0, 100.0), (2.0, 98.0), (10.0, 60.0)][i % 4];
        let flat: Vec<f64> = vol.iter().copied().collect();
        let (pl, ph) = (oracle_percentile(&flat, lo), oracle_percentile(&flat, hi));
        let out = clip_percentiles(vol.view(), lo, hi).unwrap();
        for (o, v) in out.iter().zip(vol.iter()) {
            let want = v.max(pl).min(ph);
            assert!((o - want).abs() <= 1e-9, "volume {i}: {o} vs {want}");
        }
    }
}

#[test]
fn ramp_is_clipped_to_oracle_band() {
    let ramp = Array3::from_shape_fn((10, 10, 10), |(z, y, x)| (z * 100 + y * 10 + x) as f64);
    let flat: Vec<f64> = ramp.iter().copied().collect();
    let out = clip_percentiles(ramp.view(), 0.5, 99.5).unwrap();
    let (lo, hi) = (oracle_percentile(&flat, 0.5), oracle_percentile(&flat, 99.5));
    assert!((lo - 4.995).abs() < 1e-9 && (hi - 994.005).abs() < 1e-9);
    assert_eq!(out.iter().cloned().fold(f64::INFINITY, f64::min), lo);
    assert_eq!(out.iter().cloned().fold(f64::NEG_INFINITY, f64::max), hi);
    assert_eq!(clip_percentiles(ramp.view(), 0.0, 100.0).unwrap(), ramp);
}

proptest! {
    #[test]
    fn normalization_is_bounded_and_idempotent(values in prop::collection::vec(-1e4f64..1e4, 1..200)) {
        let n = values.len();
        let vol = Array3::from_shape_vec((1, 1, n), values).unwrap();
        let once = normalize_modality(vol.view(), 0.5, 99.5).unwrap();
        prop_assert!(once.iter().all(|v| (0.0..=255.0).contains(v)));
        let twice = minmax_normalize(once.view()).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn clipping_preserves_order(values in prop::collection::vec(-100.0f64..100.0, 2..100), lo in 0.0f64..50.0, width in 1.0f64..50.0) {
        let n = values.len();
        let vol = Array3::from_shape_vec((1, 1, n), values.clone()).unwrap();
        let out = clip_percentiles(vol.view(), lo, lo + width).unwrap();
        let flat: Vec<f64> = out.iter().copied().collect();
        for i in 0..n {
            for j in 0..n {
                if values[i] <= values[j] {
                    prop_assert!(flat[i] <= flat[j]);
                }
            }
        }
    }

    #[test]
    fn cropping_keeps_every_label(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..12);
        let labels = Array3::from_shape_fn((d, 3, 3), |_| if rng.random_bool(0.05) { [1u8, 2, 4][rng.random_range(0..3)] } else { 0 });
        let vol = MultiModalVolume::new(Array4::zeros((d, 3, 3, 4)), [1.0; 3], Modality::ORDER.to_vec()).unwrap();
        let mask = SegmentationMask::new(labels.clone()).unwrap();
        let (v2, m2, offset) = crop_to_labeled_roi(&vol, &mask).unwrap();
        let count = |a: &Array3<u8>, l: u8| a.iter().filter(|&&v| v == l).count();
        for l in [1, 2, 4] {
            prop_assert_eq!(count(m2.labels(), l), count(&labels, l));
        }
        prop_assert_eq!(v2.spatial_shape().0, m2.shape().0);
        prop_assert!(offset + m2.shape().0 <= d);
    }
}

fn random_case(rng: &mut ChaCha8Rng) -> CaseArchive {
    let (d, h, w) = (rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..9));
    let imgs = Array4::from_shape_fn((d, h, w, 4), |_| rng.random());
    let gts = Array3::from_shape_fn((d, h, w), |_| [0u8, 1, 2, 4][rng.random_range(0..4)]);
    let spacing = [rng.random_range(0.1..3.0), rng.random_range(0.1..3.0), rng.random_range(0.1..3.0)];
    CaseArchive::new(imgs, gts, spacing).unwrap()
}

#[test]
fn archives_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..1000 {
        let case = random_case(&mut rng);
        let path = dir.path().join(format!("c{}.npz", i % 7));
        save_case(&case, &path).unwrap();
        let back = load_case(&path).unwrap();
        assert_eq!(back.imgs, case.imgs);
        assert_eq!(back.gts, case.gts);
        assert_eq!(back.spacing.map(f64::to_bits), case.spacing.map(f64::to_bits));
    }
    let case = random_case(&mut ChaCha8Rng::seed_from_u64(1));
    let big = CaseArchive::new(Array4::from_elem((8, 16, 16, 4), 9), Array3::zeros((8, 16, 16)), [1.0; 3]).unwrap();
    for c in [case, big] {
        save_case(&c, &dir.path().join("x.npz")).unwrap();
        assert_eq!(load_case(&dir.path().join("x.npz")).unwrap(), c);
    }
}

fn write_npz(path: &std::path::Path, gts: &Array3<u8>, spacing: bool) {
    let mut npz = NpzWriter::new(File::create(path).unwrap());
    npz.add_array("imgs", &Array4::<u8>::zeros((2, 3, 3, 4))).unwrap();
    npz.add_array("gts", gts).unwrap();
    if spacing {
        npz.add_array("spacing", &Array1::from(vec![1.0f64; 3])).unwrap();
    }
    npz.finish().unwrap();
}

#[test]
fn malformed_archives_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.npz");
    write_npz(&path, &Array3::zeros((2, 3, 3)), false);
    match load_case(&path) {
        Err(Error::Format { key, .. }) => assert_eq!(key, "spacing"),
        other => panic!("expected format error, got {other:?}"),
    }
    let mut gts = Array3::zeros((2, 3, 3));
    gts[[1, 1, 1]] = 3;
    write_npz(&path, &gts, true);
    let err = load_case(&path).unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
    std::fs::write(&path, b"not a zip archive").unwrap();
    assert!(load_case(&path).is_err());
}
