//! Two-pass segmentation: an unprompted first pass yields a coarse label
//! map, whose per-sub-region boxes prompt a refining second pass.

use ndarray::{Array2, Array3, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use segfuse_autograd::{kernels, Tensor};

use crate::attention::{attend_and_fuse, mean_fuse, AttentionParams, AttentionWeights};
use crate::error::{Error, Result};
use crate::labels::{is_valid_label, SubRegion};
use crate::model::{FusedFeatures, Model};
use crate::volume_io::{MultiModalVolume, SegmentationMask};

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..=self.row_max).contains(&r) && (self.col_min..=self.col_max).contains(&c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialPrompt {
    /// `None` when the sub-region was not predicted at all.
    pub bbox: Option<BBox>,
    pub sub_region: SubRegion,
}

impl SpatialPrompt {
    pub fn new(bbox: BBox, sub_region: SubRegion) -> Self {
        Self {
            bbox: Some(bbox),
            sub_region,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bbox.is_none()
    }
}

/// Tightest box around pixels equal to `label`, grown by `margin` and
/// clamped to the image.
pub fn extract_bbox(pred: ArrayView2<u8>, label: u8, margin: usize) -> Result<SpatialPrompt> {
    let sub_region = SubRegion::from_label(label)?;
    let (h, w) = pred.dim();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &v) in pred.indexed_iter() {
        if v == label {
            bounds = Some(match bounds {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
    }
    let bbox = bounds.map(|(r0, c0, r1, c1)| BBox {
        row_min: r0.saturating_sub(margin),
        col_min: c0.saturating_sub(margin),
        row_max: (r1 + margin).min(h - 1),
        col_max: (c1 + margin).min(w - 1),
    });
    Ok(SpatialPrompt { bbox, sub_region })
}

pub(crate) fn sigmoid_map(logits: &Tensor) -> Array2<f64> {
    let s = logits.shape();
    Array2::from_shape_vec((s[0], s[1]), logits.data().iter().map(|&x| kernels::sigmoid(x)).collect())
        .expect("logit map is 2-D")
}

/// Prompted decode of one sub-region, as probabilities.
pub fn refine_subregion(model: &Model, fused: &FusedFeatures, prompt: &SpatialPrompt) -> Result<Array2<f64>> {
    if prompt.is_empty() {
        return Err(Error::input(format!(
            "refinement of {} needs a non-empty prompt",
            prompt.sub_region
        )));
    }
    let emb = model.encode_prompt(prompt)?;
    let logits = model.decode_mask(fused, Some(&emb), prompt.sub_region)?;
    Ok(sigmoid_map(&logits))
}

/// Label priority on probability ties.
const TIE_PRIORITY: [SubRegion; 3] = [SubRegion::Et, SubRegion::Ncr, SubRegion::Ed];

/// Per-pixel arg-max over sub-regions whose probability reaches `tau`.
/// `probs` is indexed like [`SubRegion::ALL`].
pub fn combine_subregions(probs: &[Array2<f64>; 3], tau: f64) -> Result<Array2<u8>> {
    let dim = probs[0].dim();
    if probs.iter().any(|p| p.dim() != dim) {
        return Err(Error::input("probability maps must share one shape"));
    }
    Ok(Array2::from_shape_fn(dim, |ix| {
        let mut best: Option<(f64, SubRegion)> = None;
        for r in TIE_PRIORITY {
            let p = probs[r.index()][ix];
            if p >= tau && best.is_none_or(|(bp, _)| p > bp) {
                best = Some((p, r));
            }
        }
        best.map_or(0, |(_, r)| r.label())
    }))
}

/// Which parts of the framework are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub attention: bool,
    pub prompting: bool,
}

impl Variant {
    pub const BASELINE: Variant = Variant {
        attention: false,
        prompting: false,
    };
    pub const ATTENTION: Variant = Variant {
        attention: true,
        prompting: false,
    };
    pub const PROMPTING: Variant = Variant {
        attention: false,
        prompting: true,
    };
    pub const FULL: Variant = Variant {
        attention: true,
        prompting: true,
    };
    /// Ablation order.
    pub const ALL: [Variant; 4] = [Self::BASELINE, Self::ATTENTION, Self::PROMPTING, Self::FULL];

    pub fn name(self) -> &'static str {
        match (self.attention, self.prompting) {
            (false, false) => "baseline",
            (true, false) => "+attention",
            (false, true) => "+prompting",
            (true, true) => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match (self.attention, self.prompting) {
            (false, false) => "Baseline (fine-tuned, multi-modal)",
            (true, false) => "+ Modality attention",
            (false, true) => "+ Adaptive prompting",
            (true, true) => "Full framework",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::input(format!("unknown variant `{s}`")))
    }
}

impl Default for Variant {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentOptions {
    pub tau: f64,
    /// Number of prompted refinement passes after the first pass.
    pub refine_iters: usize,
    pub margin: usize,
    pub variant: Variant,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            tau: 0.5,
            refine_iters: 1,
            margin: 0,
            variant: Variant::FULL,
        }
    }
}

impl SegmentOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::input(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.refine_iters == 0 {
            return Err(Error::input("refine_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Result for one slice at model input resolution.
#[derive(Clone, Debug)]
pub struct SliceOutput {
    pub labels: Array2<u8>,
    pub probs: [Array2<f64>; 3],
    pub first_pass: Array2<u8>,
    /// `None` when attention is disabled.
    pub alpha: Option<AttentionWeights>,
}

/// Segments one `M×H×W` slice already at the model's input size.
pub fn segment_slice(
    model: &Model,
    attention: &AttentionParams,
    slice: &Tensor,
    opts: &SegmentOptions,
) -> Result<SliceOutput> {
    opts.validate()?;
    let features = model.encode_chw(slice)?;
    let mean = mean_fuse(&features)?;
    let (fused, alpha) = if opts.variant.attention {
        let (f, a) = attend_and_fuse(attention, &features)?;
        (f, Some(a))
    } else {
        ([mean.clone(), mean.clone(), mean.clone()], None)
    };
    let no_prompt = model.no_prompt_embedding();
    let first_features = |r: SubRegion| if opts.variant.prompting { &mean } else { &fused[r.index()] };
    let mut probs = SubRegion::ALL
        .iter()
        .map(|&r| Ok(sigmoid_map(&model.decode_mask(first_features(r), Some(&no_prompt), r)?)))
        .collect::<Result<Vec<_>>>()?;
    let first: [Array2<f64>; 3] = std::mem::take(&mut probs).try_into().expect("three maps");
    let first_pass = combine_subregions(&first, opts.tau)?;
    if !opts.variant.prompting {
        return Ok(SliceOutput {
            labels: first_pass.clone(),
            probs: first,
            first_pass,
            alpha,
        });
    }
    let mut current = first;
    let mut labels = first_pass.clone();
    for _ in 0..opts.refine_iters {
        let mut next = current.clone();
        for r in SubRegion::ALL {
            let prompt = extract_bbox(labels.view(), r.label(), opts.margin)?;
            // an empty region keeps its previous probabilities
            if !prompt.is_empty() {
                next[r.index()] = refine_subregion(model, &fused[r.index()], &prompt)?;
            }
        }
        current = next;
        labels = combine_subregions(&current, opts.tau)?;
    }
    Ok(SliceOutput {
        labels,
        probs: current,
        first_pass,
        alpha,
    })
}

/// Bilinear resize of an `M×H×W` slice.
pub fn resize_slice(slice: &Tensor, h: usize, w: usize) -> Tensor {
    let s = slice.shape();
    if s[1] == h && s[2] == w {
        return slice.clone();
    }
    Tensor::new(&[s[0], h, w], kernels::bilinear_forward(slice.data(), s[0], s[1], s[2], h, w))
}

/// Nearest-neighbor resize of a label map (half-pixel centers).
pub fn resize_labels(labels: ArrayView2<u8>, h: usize, w: usize) -> Array2<u8> {
    let (sh, sw) = labels.dim();
    if (sh, sw) == (h, w) {
        return labels.to_owned();
    }
    Array2::from_shape_fn((h, w), |(r, c)| {
        let sr = (((r as f64 + 0.5) * sh as f64 / h as f64) as usize).min(sh - 1);
        let sc = (((c as f64 + 0.5) * sw as f64 / w as f64) as usize).min(sw - 1);
        labels[[sr, sc]]
    })
}

/// Per-volume output: the mask plus `α` per slice when attention is on.
#[derive(Clone, Debug)]
pub struct VolumeOutput {
    pub mask: SegmentationMask,
    pub alphas: Vec<(usize, AttentionWeights)>,
}

/// Runs [`segment_slice`] over every axial slice. Slices whose size differs
/// from the model input are resampled in and out.
pub fn segment_volume(
    model: &Model,
    attention: &AttentionParams,
    volume: &MultiModalVolume,
    opts: &SegmentOptions,
) -> Result<VolumeOutput> {
    opts.validate()?;
    if !volume.is_normalized() {
        return Err(Error::input("volume intensities must lie in [0, 255]"));
    }
    if volume.modality_count() != model.config().in_channels {
        return Err(Error::input(format!(
            "volume has {} modalities, model expects {}",
            volume.modality_count(),
            model.config().in_channels
        )));
    }
    let (d, h, w) = volume.spatial_shape();
    let (mh, mw) = model.config().input_size;
    let per_slice = (0..d)
        .into_par_iter()
        .map(|z| {
            let chw = volume.slice_chw(z);
            let t = Tensor::new(&[chw.dim().0, h, w], chw.iter().copied().collect());
            let out = segment_slice(model, attention, &resize_slice(&t, mh, mw), opts)?;
            let labels = if (mh, mw) == (h, w) {
                out.labels
            } else {
                // resample probabilities, then recombine at native size
                let probs: Vec<Array2<f64>> = out
                    .probs
                    .iter()
                    .map(|p| {
                        let v = kernels::bilinear_forward(p.as_slice().expect("contiguous"), 1, mh, mw, h, w);
                        Array2::from_shape_vec((h, w), v).expect("resized map")
                    })
                    .collect();
                combine_subregions(&probs.try_into().expect("three maps"), opts.tau)?
            };
            Ok((labels, out.alpha))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mask = Array3::zeros((d, h, w));
    let mut alphas = Vec::new();
    for (z, (labels, alpha)) in per_slice.into_iter().enumerate() {
        mask.index_axis_mut(ndarray::Axis(0), z).assign(&labels);
        if let Some(a) = alpha {
            alphas.push((z, a));
        }
    }
    debug_assert!(mask.iter().all(|&v| is_valid_label(v)));
    Ok(VolumeOutput {
        mask: SegmentationMask::new(mask)?,
        alphas,
    })
}

/// Full two-pass segmentation of a volume with default options.
pub fn two_pass_segment(
    model: &Model,
    attention: &AttentionParams,
    volume: &MultiModalVolume,
) -> Result<SegmentationMask> {
    Ok(segment_volume(model, attention, volume, &SegmentOptions::default())?.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_pixel_box() {
        let mut m = Array2::<u8>::zeros((32, 32));
        m[[10, 20]] = 2;
        let p = extract_bbox(m.view(), 2, 0).unwrap();
        assert_eq!(
            p.bbox,
            Some(BBox {
                row_min: 10,
                col_min: 20,
                row_max: 10,
                col_max: 20
            })
        );
    }

    #[test]
    fn empty_region_flagged() {
        let m = Array2::<u8>::zeros((4, 4));
        assert!(extract_bbox(m.view(), 4, 0).unwrap().is_empty());
        assert!(extract_bbox(m.view(), 3, 0).is_err());
    }

    #[test]
    fn l_shape_box() {
        let mut m = Array2::<u8>::zeros((12, 12));
        for r in 3..=7 {
            m[[r, 2]] = 1;
        }
        for c in 2..=9 {
            m[[7, c]] = 1;
        }
        let b = extract_bbox(m.view(), 1, 0).unwrap().bbox.unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (3, 2, 7, 9));
    }

    #[test]
    fn margin_clamps_to_image() {
        let mut m = Array2::<u8>::zeros((5, 5));
        m[[0, 4]] = 4;
        let b = extract_bbox(m.view(), 4, 3).unwrap().bbox.unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (0, 1, 3, 4));
    }

    #[test]
    fn combine_examples() {
        let one = |v: f64| array![[v]];
        let probs = [one(0.9), one(0.2), one(0.4)];
        assert_eq!(combine_subregions(&probs, 0.5).unwrap()[[0, 0]], 1);
        let tie = [one(0.7), one(0.1), one(0.7)];
        assert_eq!(combine_subregions(&tie, 0.5).unwrap()[[0, 0]], 4);
        let none = [one(0.0), one(0.0), one(0.0)];
        assert_eq!(combine_subregions(&none, 0.5).unwrap()[[0, 0]], 0);
    }

    #[test]
    fn nearest_resize_keeps_labels() {
        let m = array![[0u8, 1], [2, 4]];
        let up = resize_labels(m.view(), 4, 4);
        assert_eq!(up[[0, 0]], 0);
        assert_eq!(up[[3, 3]], 4);
        assert_eq!(resize_labels(up.view(), 2, 2), m);
    }
}
