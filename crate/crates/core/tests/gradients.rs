//! Finite-difference check of the whole differentiable path: shared encoder,
//! attention fusion, box-prompted decoding and the combined loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segfuse_autograd::{Graph, ParamStore, Tensor};
use segfuse_core::attention::{attend_graph, AttentionParams};
use segfuse_core::labels::SubRegion;
use segfuse_core::model::{Model, ModelConfig};
use segfuse_core::prompting::{BBox, SpatialPrompt};
use segfuse_core::training::combined_loss_graph;

struct Instance {
    model: Model,
    attention: AttentionParams,
    slice: Tensor,
    target: Tensor,
    prompt: SpatialPrompt,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::build(ModelConfig::desk(), seed).unwrap();
    let c = model.config().prompt_embed_dim;
    let w = std::array::from_fn(|_| (0..c).map(|_| rng.random_range(-0.5..0.5)).collect());
    let b = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
    let attention = AttentionParams::from_values(w, b).unwrap();
    let (h, wd) = model.config().input_size;
    // distinct level and texture per modality so that attention matters
    let slice = Tensor::new(
        &[4, h, wd],
        (0..4 * h * wd)
            .map(|i| {
                let (m, r, c) = (i / (h * wd), (i / wd) % h, i % wd);
                let wave = ((r * (m + 1)) as f64 * 0.3).sin() * ((c as f64) * 0.2 * m as f64).cos();
                (40.0 + 50.0 * m as f64 + 35.0 * wave + rng.random_range(-10.0..10.0)).clamp(0.0, 255.0)
            })
            .collect(),
    );
    let (r0, c0) = (rng.random_range(0..h / 2), rng.random_range(0..wd / 2));
    let bbox = BBox {
        row_min: r0,
        col_min: c0,
        row_max: rng.random_range(r0..h),
        col_max: rng.random_range(c0..wd),
    };
    let target = Tensor::new(
        &[h, wd],
        (0..h * wd).map(|i| f64::from(u8::from(bbox.contains(i / wd, i % wd)))).collect(),
    );
    let region = SubRegion::ALL[(seed % 3) as usize];
    Instance {
        model,
        attention,
        slice,
        target,
        prompt: SpatialPrompt::new(bbox, region),
    }
}

/// Loss and, optionally, gradients for the model and attention stores.
fn evaluate(inst: &Instance, model: &ParamStore, attention: &ParamStore, grads: bool) -> (f64, Vec<Option<Tensor>>, Vec<Option<Tensor>>) {
    let mut m = inst.model.clone();
    *m.store_mut() = model.clone();
    let mut a = inst.attention.clone();
    *a.store_mut() = attention.clone();
    let mut g = Graph::new();
    let enc = m.encode_graph(&mut g, &inst.slice).unwrap();
    let region = inst.prompt.sub_region;
    let fused = attend_graph(&mut g, &a, &enc).unwrap()[region.index()];
    let sparse = m.prompt_graph(&mut g, Some(&inst.prompt)).unwrap();
    let logits = m.decode_graph(&mut g, fused.main, fused.skip, sparse, region).unwrap();
    let loss = combined_loss_graph(&mut g, logits, &inst.target, 1.0, 1.0).total;
    let value = g.value(loss).item();
    if !grads {
        return (value, Vec::new(), Vec::new());
    }
    let gr = g.backward(loss);
    (value, g.param_grads(m.store(), &gr), g.param_grads(a.store(), &gr))
}

fn relative_error(an: f64, fd: f64) -> f64 {
    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6)
}

#[test]
fn full_path_gradients_match_finite_differences() {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..20 {
        let inst = instance(seed);
        let (ms, as_) = (inst.model.store().clone(), inst.attention.store().clone());
        let (_, mg, ag) = evaluate(&inst, &ms, &as_, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut coords: Vec<(bool, usize, usize)> = Vec::new();
        let region = inst.prompt.sub_region.name();
        let attn_ids: Vec<_> = as_.ids().collect();
        // only the prompted sub-region's weights reach the loss
        let active: Vec<usize> = (0..attn_ids.len()).filter(|&k| as_.name(attn_ids[k]).ends_with(region)).collect();
        for _ in 0..6 {
            let k = active[rng.random_range(0..active.len())];
            coords.push((false, k, rng.random_range(0..as_.get(attn_ids[k]).len())));
        }
        let model_ids: Vec<_> = ms.ids().filter(|&id| ms.is_trainable(id)).collect();
        for _ in 0..10 {
            let k = rng.random_range(0..model_ids.len());
            coords.push((true, k, rng.random_range(0..ms.get(model_ids[k]).len())));
        }
        for (in_model, k, j) in coords {
            let bump = |d: f64| {
                let (mut m2, mut a2) = (ms.clone(), as_.clone());
                if in_model {
                    m2.get_mut(model_ids[k]).data_mut()[j] += d;
                } else {
                    a2.get_mut(attn_ids[k]).data_mut()[j] += d;
                }
                evaluate(&inst, &m2, &a2, false).0
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = if in_model {
                let idx = ms.ids().position(|id| id == model_ids[k]).unwrap();
                mg[idx].as_ref().map_or(0.0, |t| t.data()[j])
            } else {
                ag[k].as_ref().map_or(0.0, |t| t.data()[j])
            };
            let err = relative_error(an, fd);
            let name = if in_model { ms.name(model_ids[k]) } else { as_.name(attn_ids[k]) };
            assert!(err <= 1e-4, "instance {seed}, {name}[{j}]: analytic {an:e} vs fd {fd:e}");
            worst = worst.max(err);
            checked += 1;
        }
    }
    eprintln!("{checked} coordinates, worst relative error {worst:.2e}");
}

