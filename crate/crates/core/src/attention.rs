//! Sub-region-aware modality attention: one scalar weight per
//! (modality, sub-region) from pooled features, softmax across modalities.

use segfuse_autograd::{Graph, Init, NodeId, ParamId, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::labels::SubRegion;
use crate::model::{EncoderOutput, FeatureMapSet, FusedFeatures};

const SUM_TOL: f64 = 1e-6;

/// `W_r` (`1×C`) and `b_r` for each sub-region, held in their own store.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    store: ParamStore,
    weights: [ParamId; 3],
    biases: [ParamId; 3],
    channels: usize,
}

impl AttentionParams {
    /// Zero weights and biases: uniform attention for any input.
    pub fn zeros(channels: usize) -> Self {
        let mut store = ParamStore::new();
        let mut rng = rand::rng();
        let mut weights = [ParamId(0); 3];
        let mut biases = [ParamId(0); 3];
        for r in SubRegion::ALL {
            weights[r.index()] = store.add(format!("W_{}", r.name()), &[1, channels], Init::Zeros, &mut rng);
            biases[r.index()] = store.add(format!("b_{}", r.name()), &[1], Init::Zeros, &mut rng);
        }
        Self {
            store,
            weights,
            biases,
            channels,
        }
    }

    pub fn from_values(weights: [Vec<f64>; 3], biases: [f64; 3]) -> Result<Self> {
        let c = weights[0].len();
        if c == 0 || weights.iter().any(|w| w.len() != c) {
            return Err(Error::input("attention weights must share one non-zero length"));
        }
        if weights.iter().flatten().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::input("attention parameters must be finite"));
        }
        let mut p = Self::zeros(c);
        for r in SubRegion::ALL {
            let i = r.index();
            *p.store.get_mut(p.weights[i]) = Tensor::new(&[1, c], weights[i].clone());
            *p.store.get_mut(p.biases[i]) = Tensor::new(&[1], vec![biases[i]]);
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weight(&self, r: SubRegion) -> &[f64] {
        self.store.get(self.weights[r.index()]).data()
    }

    pub fn bias(&self, r: SubRegion) -> f64 {
        self.store.get(self.biases[r.index()]).data()[0]
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn load_parameters(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let t = lookup(&name).ok_or_else(|| Error::format(format!("attention/{name}"), "missing parameter"))?;
            if t.shape() != self.store.get(id).shape() {
                return Err(Error::format(format!("attention/{name}"), "shape mismatch"));
            }
            *self.store.get_mut(id) = t;
        }
        Ok(())
    }
}

/// `α`, stored modality-major: `alpha[m][r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    alpha: Vec<[f64; 3]>,
}

impl AttentionWeights {
    pub fn new(alpha: Vec<[f64; 3]>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::input("attention needs at least one modality"));
        }
        for r in 0..3 {
            let s: f64 = alpha.iter().map(|a| a[r]).sum();
            if alpha.iter().any(|a| !(a[r] >= 0.0)) || (s - 1.0).abs() > SUM_TOL {
                return Err(Error::input(format!("weights for sub-region {r} do not form a distribution")));
            }
        }
        Ok(Self { alpha })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            alpha: vec![[1.0 / m as f64; 3]; m],
        }
    }

    pub fn modality_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn get(&self, m: usize, r: SubRegion) -> f64 {
        self.alpha[m][r.index()]
    }

    /// Weights over modalities for one sub-region.
    pub fn for_region(&self, r: SubRegion) -> Vec<f64> {
        self.alpha.iter().map(|a| a[r.index()]).collect()
    }

    pub fn rows(&self) -> &[[f64; 3]] {
        &self.alpha
    }
}

/// `tanh(W_r · gap(f_m) + b_r)`.
pub fn energy(params: &AttentionParams, f_m: &Tensor, r: SubRegion) -> Result<f64> {
    if f_m.ndim() != 3 || f_m.shape()[0] != params.channels {
        return Err(Error::input(format!(
            "feature map {:?} does not have {} channels",
            f_m.shape(),
            params.channels
        )));
    }
    let c = params.channels;
    let hw = f_m.len() / c;
    let w = params.weight(r);
    let dot: f64 = f_m
        .data()
        .chunks(hw)
        .zip(w)
        .map(|(plane, wc)| wc * plane.iter().sum::<f64>() / hw as f64)
        .sum();
    Ok((dot + params.bias(r)).tanh())
}

/// Max-shifted softmax.
pub fn attention_weights(energies: &[f64]) -> Result<Vec<f64>> {
    if energies.is_empty() {
        return Err(Error::input("no energies given"));
    }
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::input("energies must be finite"));
    }
    let mx = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = energies.iter().map(|e| (e - mx).exp()).collect();
    let z = ordered_sum(ex.clone());
    Ok(ex.into_iter().map(|e| e / z).collect())
}

/// Convex combination `Σ_m α_m f_m`.
pub fn fuse(maps: &[Tensor], alpha: &[f64]) -> Result<Tensor> {
    if maps.is_empty() || maps.len() != alpha.len() {
        return Err(Error::input(format!("{} maps but {} weights", maps.len(), alpha.len())));
    }
    if (alpha.iter().sum::<f64>() - 1.0).abs() > SUM_TOL {
        return Err(Error::input("fusion weights must sum to 1"));
    }
    let shape = maps[0].shape();
    if maps.iter().any(|m| m.shape() != shape) {
        return Err(Error::input("feature maps must share one shape"));
    }
    let mut terms = vec![0.0; maps.len()];
    let out = (0..maps[0].len())
        .map(|i| {
            for ((t, m), &a) in terms.iter_mut().zip(maps).zip(alpha) {
                *t = a * m.data()[i];
            }
            ordered_sum(terms.clone())
        })
        .collect();
    Ok(Tensor::new(shape, out))
}

/// Sum in ascending order, so that the result does not depend on the order
/// in which modalities are listed.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Fuses both the main and the skip maps with one weight vector.
pub fn fuse_set(features: &FeatureMapSet, alpha: &[f64]) -> Result<FusedFeatures> {
    features.validate()?;
    Ok(FusedFeatures {
        main: fuse(&features.per_modality, alpha)?,
        skip: fuse(&features.skip, alpha)?,
    })
}

/// Equal-weight fusion, used when attention is disabled.
pub fn mean_fuse(features: &FeatureMapSet) -> Result<FusedFeatures> {
    let m = features.modality_count();
    fuse_set(features, &vec![1.0 / m as f64; m])
}

/// Fused features for every sub-region (in [`SubRegion::ALL`] order) and `α`.
pub fn attend_and_fuse(
    params: &AttentionParams,
    features: &FeatureMapSet,
) -> Result<([FusedFeatures; 3], AttentionWeights)> {
    features.validate()?;
    let m = features.modality_count();
    let mut alpha = vec![[0.0; 3]; m];
    let mut fused = Vec::with_capacity(3);
    for r in SubRegion::ALL {
        let e = features
            .per_modality
            .iter()
            .map(|f| energy(params, f, r))
            .collect::<Result<Vec<_>>>()?;
        let a = attention_weights(&e)?;
        for (row, v) in alpha.iter_mut().zip(&a) {
            row[r.index()] = *v;
        }
        fused.push(fuse_set(features, &a)?);
    }
    let fused: [FusedFeatures; 3] = fused.try_into().expect("three sub-regions");
    Ok((fused, AttentionWeights::new(alpha)?))
}

/// Graph nodes of one fused feature pair.
#[derive(Clone, Copy, Debug)]
pub struct FusedNodes {
    pub main: NodeId,
    pub skip: NodeId,
    /// `[M]` weights used for this fusion.
    pub alpha: NodeId,
}

/// Differentiable counterpart of [`attend_and_fuse`].
pub fn attend_graph(g: &mut Graph, params: &AttentionParams, encoded: &[EncoderOutput]) -> Result<[FusedNodes; 3]> {
    if encoded.is_empty() {
        return Err(Error::input("no encoded modalities"));
    }
    let c = g.shape(encoded[0].main)[0];
    if c != params.channels {
        return Err(Error::input(format!("features have {c} channels, attention expects {}", params.channels)));
    }
    let pooled: Vec<NodeId> = encoded
        .iter()
        .map(|e| {
            let p = g.mean_spatial(e.main);
            g.reshape(p, &[1, c])
        })
        .collect();
    let mains: Vec<NodeId> = encoded.iter().map(|e| e.main).collect();
    let skips: Vec<NodeId> = encoded.iter().map(|e| e.skip).collect();
    let m = encoded.len();
    let out: Vec<FusedNodes> = SubRegion::ALL
        .iter()
        .map(|r| {
            let w = g.param(&params.store, params.weights[r.index()]);
            let b = g.param(&params.store, params.biases[r.index()]);
            let energies: Vec<NodeId> = pooled
                .iter()
                .map(|&p| {
                    let lin = g.linear(p, w, Some(b));
                    g.tanh(lin)
                })
                .collect();
            let row = if m == 1 { energies[0] } else { g.concat_cols(&energies) };
            let sm = g.softmax_rows(row);
            let alpha = g.reshape(sm, &[m]);
            FusedNodes {
                main: g.weighted_sum(&mains, alpha),
                skip: g.weighted_sum(&skips, alpha),
                alpha,
            }
        })
        .collect();
    Ok(out.try_into().expect("three sub-regions"))
}

/// Equal-weight fusion on the graph.
pub fn mean_graph(g: &mut Graph, encoded: &[EncoderOutput]) -> Result<FusedNodes> {
    if encoded.is_empty() {
        return Err(Error::input("no encoded modalities"));
    }
    let m = encoded.len();
    let alpha = g.leaf(Tensor::full(&[m], 1.0 / m as f64));
    let mains: Vec<NodeId> = encoded.iter().map(|e| e.main).collect();
    let skips: Vec<NodeId> = encoded.iter().map(|e| e.skip).collect();
    Ok(FusedNodes {
        main: g.weighted_sum(&mains, alpha),
        skip: g.weighted_sum(&skips, alpha),
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, v: f64) -> Tensor {
        Tensor::full(&[c, 2, 2], v)
    }

    #[test]
    fn zero_params_give_zero_energy() {
        let p = AttentionParams::zeros(3);
        assert_eq!(energy(&p, &map(3, 7.0), SubRegion::Ed).unwrap(), 0.0);
    }

    #[test]
    fn bias_only_energy() {
        let p = AttentionParams::from_values([vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]], [0.5, 0.5, 0.5]).unwrap();
        let e = energy(&p, &map(2, 0.0), SubRegion::Ncr).unwrap();
        assert!((e - 0.46212).abs() < 1e-5);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = AttentionParams::zeros(3);
        assert!(energy(&p, &map(2, 0.0), SubRegion::Et).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(attention_weights(&[0.3; 4]).unwrap(), vec![0.25; 4]);
        let a = attention_weights(&[2f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        for (x, y) in a.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(attention_weights(&[-0.7]).unwrap(), vec![1.0]);
        assert!(attention_weights(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn fuse_examples() {
        let out = fuse(&[map(1, 0.0), map(1, 2.0)], &[0.5, 0.5]).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
        let one_hot = fuse(&[map(1, 3.0), map(1, -4.0)], &[0.0, 1.0]).unwrap();
        assert_eq!(one_hot, map(1, -4.0));
        assert!(fuse(&[map(1, 0.0)], &[0.5, 0.5]).is_err());
    }
}
