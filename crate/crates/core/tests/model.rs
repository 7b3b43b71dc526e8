use std::time::Instant;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segfuse_autograd::{Graph, Tensor};
use segfuse_core::attention::{attend_graph, mean_fuse};
use segfuse_core::labels::SubRegion;
use segfuse_core::model::{Model, ModelConfig};
use segfuse_core::prompting::{BBox, SpatialPrompt};
use segfuse_core::Error;

fn random_slice(m: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((h, w, m), |_| rng.random_range(0.0..255.0))
}

fn desk() -> Model {
    Model::build(ModelConfig::desk(), 3).unwrap()
}

#[test]
fn full_scale_config_reports_stage_widths() {
    let m = Model::build(ModelConfig::full_scale(), 0).unwrap();
    assert_eq!(m.stage_widths(), &[64, 128, 160, 320]);
    assert!(m.num_parameters() > 1_000_000);
    assert_eq!(m.feature_shape(), (256, 16, 16));
}

#[test]
fn desk_builds_quickly_and_deterministically() {
    let t = Instant::now();
    let a = desk();
    assert!(t.elapsed().as_secs_f64() < 1.0);
    let b = desk();
    assert!(a.store().same_values(b.store()));
    let c = Model::build(ModelConfig::desk(), 4).unwrap();
    assert!(!a.store().same_values(c.store()));
}

#[test]
fn invalid_config_lists_constraints() {
    let mut cfg = ModelConfig::desk();
    cfg.encoder_depths.pop();
    cfg.decoder_heads = 3;
    match Model::build(cfg, 0) {
        Err(Error::Config(msg)) => {
            assert!(msg.contains("encoder_depths"), "{msg}");
            assert!(msg.contains("decoder_heads"), "{msg}");
        }
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn parameter_count_independent_of_modalities() {
    let four = Model::build(ModelConfig::desk(), 0).unwrap();
    let one = Model::build(ModelConfig::desk().with_in_channels(1), 0).unwrap();
    assert_eq!(four.num_parameters(), one.num_parameters());
}

#[test]
fn identical_channels_give_identical_features() {
    let m = desk();
    let single = random_slice(1, 64, 64, 1);
    let slice = Array3::from_shape_fn((64, 64, 4), |(r, c, _)| single[[r, c, 0]]);
    let f = m.encode_per_modality(&slice).unwrap();
    assert_eq!(f.per_modality.len(), 4);
    assert_eq!(f.per_modality[0].shape(), &[32, 4, 4]);
    for k in 1..4 {
        assert_eq!(f.per_modality[k], f.per_modality[0]);
        assert_eq!(f.skip[k], f.skip[0]);
    }
}

#[test]
fn permuting_modalities_permutes_features() {
    let m = desk();
    let slice = random_slice(4, 64, 64, 2);
    let perm = [2usize, 0, 3, 1];
    let permuted = Array3::from_shape_fn((64, 64, 4), |(r, c, k)| slice[[r, c, perm[k]]]);
    let a = m.encode_per_modality(&slice).unwrap();
    let b = m.encode_per_modality(&permuted).unwrap();
    for k in 0..4 {
        assert_eq!(b.per_modality[k], a.per_modality[perm[k]]);
    }
}

#[test]
fn wrong_slice_shape_rejected() {
    let m = desk();
    assert!(matches!(
        m.encode_per_modality(&random_slice(4, 32, 64, 0)),
        Err(Error::InvalidInput(_))
    ));
    assert!(m.encode_per_modality(&random_slice(3, 64, 64, 0)).is_err());
}

#[test]
fn prompt_encoding_is_position_sensitive() {
    let m = desk();
    let b = BBox {
        row_min: 10,
        col_min: 12,
        row_max: 30,
        col_max: 40,
    };
    let p = SpatialPrompt::new(b, SubRegion::Ed);
    let e1 = m.encode_prompt(&p).unwrap();
    assert_eq!(e1, m.encode_prompt(&p).unwrap());
    assert_eq!(e1.dim(), 32);
    let shifted = SpatialPrompt::new(
        BBox {
            row_min: 11,
            col_min: 13,
            row_max: 31,
            col_max: 41,
        },
        SubRegion::Ed,
    );
    assert_ne!(e1, m.encode_prompt(&shifted).unwrap());
    let full = SpatialPrompt::new(
        BBox {
            row_min: 0,
            col_min: 0,
            row_max: 63,
            col_max: 63,
        },
        SubRegion::Et,
    );
    assert!(m.encode_prompt(&full).unwrap().vector().iter().all(|v| v.is_finite()));
    let outside = SpatialPrompt::new(
        BBox {
            row_min: 0,
            col_min: 0,
            row_max: 64,
            col_max: 10,
        },
        SubRegion::Et,
    );
    assert!(m.encode_prompt(&outside).is_err());
}

#[test]
fn decode_shape_finiteness_and_determinism() {
    let m = desk();
    let f = m.encode_per_modality(&random_slice(4, 64, 64, 5)).unwrap();
    let fused = mean_fuse(&f).unwrap();
    let a = m.decode_mask(&fused, None, SubRegion::Ncr).unwrap();
    assert_eq!(a.shape(), &[64, 64]);
    assert!(a.is_finite());
    assert_eq!(a, m.decode_mask(&fused, None, SubRegion::Ncr).unwrap());
    let p = m
        .encode_prompt(&SpatialPrompt::new(
            BBox {
                row_min: 5,
                col_min: 5,
                row_max: 20,
                col_max: 20,
            },
            SubRegion::Ncr,
        ))
        .unwrap();
    let b = m.decode_mask(&fused, Some(&p), SubRegion::Ncr).unwrap();
    assert_ne!(a, b);
    let mut bad = fused.clone();
    bad.main = Tensor::zeros(&[32, 2, 2]);
    assert!(matches!(m.decode_mask(&bad, None, SubRegion::Ncr), Err(Error::InvalidInput(_))));
}

#[test]
fn training_step_cost_is_desk_scale() {
    let m = desk();
    let attn = segfuse_core::attention::AttentionParams::zeros(32);
    let slice = random_slice(4, 64, 64, 9);
    let chw = Tensor::new(
        &[4, 64, 64],
        slice.view().permuted_axes([2, 0, 1]).iter().copied().collect(),
    );
    let t = Instant::now();
    let mut g = Graph::new();
    let enc = m.encode_graph(&mut g, &chw).unwrap();
    let fused = attend_graph(&mut g, &attn, &enc).unwrap();
    let sparse = m.prompt_graph(&mut g, None).unwrap();
    let logits = m
        .decode_graph(&mut g, fused[0].main, fused[0].skip, sparse, SubRegion::Ncr)
        .unwrap();
    let target = Tensor::zeros(&[64, 64]);
    let loss = g.bce_with_logits(logits, &target);
    let grads = g.backward(loss);
    let pg = g.param_grads(m.store(), &grads);
    let elapsed = t.elapsed().as_secs_f64();
    eprintln!("forward+backward: {elapsed:.3}s, {} nodes", g.len());
    assert!(pg.iter().any(|x| x.is_some()));
    assert!(elapsed < 2.0);
}
