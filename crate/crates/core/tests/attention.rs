use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segfuse_autograd::{Graph, Tensor};
use segfuse_core::attention::{attend_and_fuse, attend_graph, attention_weights, energy, fuse, AttentionParams};
use segfuse_core::labels::SubRegion;
use segfuse_core::model::{EncoderOutput, FeatureMapSet};

const C: usize = 4;

fn tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

fn params(rng: &mut ChaCha8Rng, scale: f64) -> AttentionParams {
    let w = std::array::from_fn(|_| (0..C).map(|_| rng.random_range(-scale..scale)).collect());
    let b = std::array::from_fn(|_| rng.random_range(-scale..scale));
    AttentionParams::from_values(w, b).unwrap()
}

fn features(m: usize, rng: &mut ChaCha8Rng) -> FeatureMapSet {
    FeatureMapSet {
        per_modality: (0..m).map(|_| tensor(&[C, 2, 3], rng, 5.0)).collect(),
        skip: (0..m).map(|_| tensor(&[2, 3, 3], rng, 5.0)).collect(),
        stage: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(250))]

    #[test]
    fn weights_form_a_distribution(seed in any::<u64>(), m in 1usize..7, scale in 0.01f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(&mut rng, scale);
        let f = features(m, &mut rng);
        let (_, alpha) = attend_and_fuse(&p, &f).unwrap();
        for r in SubRegion::ALL {
            let a = alpha.for_region(r);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(a.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn softmax_ignores_common_shift(e in prop::collection::vec(-1.0f64..1.0, 1..8), shift in -50.0f64..50.0) {
        let base = attention_weights(&e).unwrap();
        let moved: Vec<f64> = e.iter().map(|v| v + shift).collect();
        for (a, b) in base.iter().zip(attention_weights(&moved).unwrap()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn permuting_modalities_permutes_weights(seed in any::<u64>(), m in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(&mut rng, 2.0);
        let f = features(m, &mut rng);
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled = FeatureMapSet {
            per_modality: perm.iter().map(|&k| f.per_modality[k].clone()).collect(),
            skip: perm.iter().map(|&k| f.skip[k].clone()).collect(),
            stage: 0,
        };
        let (fa, aa) = attend_and_fuse(&p, &f).unwrap();
        let (fb, ab) = attend_and_fuse(&p, &shuffled).unwrap();
        for (i, &k) in perm.iter().enumerate() {
            prop_assert_eq!(ab.rows()[i], aa.rows()[k]);
        }
        prop_assert_eq!(fa, fb);
    }

    #[test]
    fn fused_map_stays_within_modality_range(seed in any::<u64>(), m in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(&mut rng, 3.0);
        let f = features(m, &mut rng);
        let (fused, _) = attend_and_fuse(&p, &f).unwrap();
        for out in &fused {
            for (i, v) in out.main.data().iter().enumerate() {
                let vals = f.per_modality.iter().map(|t| t.data()[i]);
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn energy_and_weight_examples() {
    let zero_map = Tensor::zeros(&[C, 2, 2]);
    let p = AttentionParams::from_values(std::array::from_fn(|_| vec![0.3; C]), [0.5; 3]).unwrap();
    assert!((energy(&p, &zero_map, SubRegion::Ed).unwrap() - 0.5f64.tanh()).abs() < 1e-15);
    assert!((0.5f64.tanh() - 0.46212).abs() < 1e-5);
    let a = attention_weights(&[2f64.ln(), 0.0, 0.0, 0.0]).unwrap();
    for (v, want) in a.iter().zip([0.4, 0.2, 0.2, 0.2]) {
        assert!((v - want).abs() < 1e-15);
    }
    assert_eq!(attention_weights(&[3.0]).unwrap(), vec![1.0]);
    let two = [Tensor::zeros(&[1, 2, 2]), Tensor::full(&[1, 2, 2], 2.0)];
    assert_eq!(fuse(&two, &[0.5, 0.5]).unwrap(), Tensor::full(&[1, 2, 2], 1.0));
    assert!(attention_weights(&[f64::NAN]).is_err());
    assert!(energy(&p, &Tensor::zeros(&[C + 1, 2, 2]), SubRegion::Ncr).is_err());
}

/// Central differences of a fixed projection of the fused maps with respect
/// to every attention parameter and every feature value.
#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..10 {
        let m = 1 + case % 4;
        let p = params(&mut rng, 1.0);
        let f = features(m, &mut rng);
        let region = SubRegion::ALL[case % 3];
        let proj_main = tensor(&[C, 2, 3], &mut rng, 1.0);
        let proj_skip = tensor(&[2, 3, 3], &mut rng, 1.0);

        let eval = |p: &AttentionParams, f: &FeatureMapSet, grads: bool| {
            let mut g = Graph::new();
            let enc: Vec<EncoderOutput> = f
                .per_modality
                .iter()
                .zip(&f.skip)
                .map(|(a, b)| EncoderOutput {
                    main: g.leaf(a.clone()),
                    skip: g.leaf(b.clone()),
                })
                .collect();
            let fused = attend_graph(&mut g, p, &enc).unwrap()[region.index()];
            let pm = g.leaf(proj_main.clone());
            let ps = g.leaf(proj_skip.clone());
            let a = g.mul(fused.main, pm);
            let b = g.mul(fused.skip, ps);
            let (a, b) = (g.sum_all(a), g.sum_all(b));
            let s = g.add(a, b);
            let value = g.value(s).item();
            if !grads {
                return (value, Vec::new(), Vec::new());
            }
            let gr = g.backward(s);
            let pg = g.param_grads(p.store(), &gr);
            let fg = enc.iter().map(|e| gr.get(e.main).cloned().unwrap()).collect();
            (value, pg, fg)
        };
        let (value, pgrads, fgrads) = eval(&p, &f, true);
        let graph_fused = attend_and_fuse(&p, &f).unwrap().0[region.index()].clone();
        let direct: f64 = graph_fused.main.data().iter().zip(proj_main.data()).map(|(a, b)| a * b).sum::<f64>()
            + graph_fused.skip.data().iter().zip(proj_skip.data()).map(|(a, b)| a * b).sum::<f64>();
        assert!((value - direct).abs() < 1e-9);

        let h = 1e-6;
        let check = |an: f64, plus: f64, minus: f64, what: &str| {
            let fd = (plus - minus) / (2.0 * h);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err <= 1e-4 || (fd - an).abs() < 1e-9, "{what}: analytic {an} fd {fd}");
        };
        let ids: Vec<_> = p.store().ids().collect();
        for (k, id) in ids.iter().enumerate() {
            for j in 0..p.store().get(*id).len() {
                let bump = |d: f64| {
                    let mut q = p.clone();
                    q.store_mut().get_mut(*id).data_mut()[j] += d;
                    eval(&q, &f, false).0
                };
                let an = pgrads[k].as_ref().map_or(0.0, |t| t.data()[j]);
                check(an, bump(h), bump(-h), &format!("param {k}[{j}]"));
            }
        }
        for mi in 0..m {
            for j in 0..f.per_modality[mi].len() {
                let bump = |d: f64| {
                    let mut q = f.clone();
                    q.per_modality[mi].data_mut()[j] += d;
                    eval(&p, &q, false).0
                };
                check(fgrads[mi].data()[j], bump(h), bump(-h), &format!("f_{mi}[{j}]"));
            }
        }
    }
}
