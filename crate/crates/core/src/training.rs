//! Losses, augmentation, one-vs-all target sampling and the optimization loop.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use segfuse_autograd::{kernels, Adam, Graph, NodeId, Tensor};

use crate::attention::{attend_graph, mean_graph, AttentionParams};
use crate::error::{Error, Result};
use crate::evaluation::dice;
use crate::labels::SubRegion;
use crate::model::Model;
use crate::prompting::{combine_subregions, extract_bbox, sigmoid_map, resize_labels, resize_slice, segment_volume, BBox, SegmentOptions, SpatialPrompt, Variant};
use crate::volume_io::CaseArchive;

/// Soft-Dice smoothing.
pub const DICE_EPS: f64 = 1.0;

fn check_pair(logits: &ArrayView2<f64>, target: &ArrayView2<f64>) -> Result<()> {
    if logits.dim() != target.dim() {
        return Err(Error::input(format!(
            "logits {:?} and target {:?} differ in shape",
            logits.dim(),
            target.dim()
        )));
    }
    if logits.is_empty() {
        return Err(Error::input("empty logit map"));
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(logits)`, in softplus form.
pub fn ce_loss(logits: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check_pair(&logits, &target)?;
    let total: f64 = logits
        .iter()
        .zip(target.iter())
        .map(|(&x, &t)| kernels::softplus(x) - t * x)
        .sum();
    Ok(total / logits.len() as f64)
}

/// `1 − soft Dice` with smoothing [`DICE_EPS`].
pub fn iou_loss(logits: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check_pair(&logits, &target)?;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&x, &t) in logits.iter().zip(target.iter()) {
        let p = kernels::sigmoid(x);
        inter += p * t;
        sp += p;
        st += t;
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS))
}

pub fn combined_loss(logits: ArrayView2<f64>, target: ArrayView2<f64>, lambda_seg: f64, lambda_iou: f64) -> Result<f64> {
    if lambda_seg < 0.0 || lambda_iou < 0.0 {
        return Err(Error::input("loss weights must be non-negative"));
    }
    Ok(lambda_seg * ce_loss(logits, target)? + lambda_iou * iou_loss(logits, target)?)
}

/// Loss nodes of one prediction.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub ce: NodeId,
    pub iou: NodeId,
}

/// Differentiable [`combined_loss`].
pub fn combined_loss_graph(g: &mut Graph, logits: NodeId, target: &Tensor, lambda_seg: f64, lambda_iou: f64) -> LossNodes {
    let ce = g.bce_with_logits(logits, target);
    let iou = g.soft_dice_loss(logits, target, DICE_EPS);
    let a = g.scale(ce, lambda_seg);
    let b = g.scale(iou, lambda_iou);
    LossNodes {
        total: g.add(a, b),
        ce,
        iou,
    }
}

/// `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::input(format!("step {step} outside schedule of {total_steps} steps")));
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// Learning rate of update `i` out of `updates`: the first update uses the
/// base rate and the last one decays to zero.
pub fn schedule_lr(i: usize, updates: usize, base_lr: f64) -> f64 {
    if updates <= 1 {
        return base_lr;
    }
    cosine_lr(i, updates - 1, base_lr).expect("index within schedule")
}

/// Picks a sub-region present in the slice (any of the three when none is)
/// and returns its binary mask.
pub fn sample_subregion_target<R: Rng + ?Sized>(gt: ArrayView2<u8>, rng: &mut R) -> (SubRegion, Array2<f64>) {
    let present: Vec<SubRegion> = SubRegion::ALL
        .into_iter()
        .filter(|r| gt.iter().any(|&v| v == r.label()))
        .collect();
    let pool = if present.is_empty() { SubRegion::ALL.to_vec() } else { present };
    let r = pool[rng.random_range(0..pool.len())];
    (r, gt.map(|&v| f64::from(u8::from(v == r.label()))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotate_deg: f64,
    pub scale: (f64, f64),
    pub intensity_jitter_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_deg: 15.0,
            scale: (0.9, 1.1),
            intensity_jitter_frac: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotate_deg: 0.0,
            scale: (1.0, 1.0),
            intensity_jitter_frac: 0.0,
        }
    }
}

/// One concrete augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub angle_deg: f64,
    pub scale: f64,
    /// Multiplicative factor per modality.
    pub jitter: Vec<f64>,
}

impl AugmentDraw {
    pub fn identity(m: usize) -> Self {
        Self {
            angle_deg: 0.0,
            scale: 1.0,
            jitter: vec![1.0; m],
        }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, m: usize, rng: &mut R) -> Self {
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let angle_deg = uniform(-cfg.rotate_deg, cfg.rotate_deg);
        let scale = uniform(cfg.scale.0, cfg.scale.1);
        let j = cfg.intensity_jitter_frac;
        let jitter = (0..m).map(|_| uniform(1.0 - j, 1.0 + j)).collect();
        Self {
            angle_deg,
            scale,
            jitter,
        }
    }
}

/// Applies a draw to an `H×W×M` slice and its `H×W` labels. The image is
/// resampled bilinearly with edge clamping, labels by nearest neighbor with
/// zero outside.
pub fn apply_augment(slice: ArrayView3<f64>, mask: ArrayView2<u8>, draw: &AugmentDraw) -> Result<(Array3<f64>, Array2<u8>)> {
    let (h, w, m) = slice.dim();
    if mask.dim() != (h, w) {
        return Err(Error::input("slice and mask shapes differ"));
    }
    if draw.jitter.len() != m {
        return Err(Error::input("jitter count must equal modality count"));
    }
    let geometric = draw.angle_deg != 0.0 || draw.scale != 1.0;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = draw.angle_deg.to_radians().sin_cos();
    // output pixel -> source coordinate (inverse rotation and scale)
    let source = |r: usize, c: usize| {
        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
        let sy = (cos * dy - sin * dx) / draw.scale + cy;
        let sx = (sin * dy + cos * dx) / draw.scale + cx;
        (sy, sx)
    };
    let mut img = Array3::zeros((h, w, m));
    let mut labels = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let (sy, sx) = if geometric { source(r, c) } else { (r as f64, c as f64) };
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                labels[[r, c]] = mask[[ny as usize, nx as usize]];
            }
            let y = sy.clamp(0.0, (h - 1) as f64);
            let x = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            for k in 0..m {
                let v = (1.0 - fy) * ((1.0 - fx) * slice[[y0, x0, k]] + fx * slice[[y0, x1, k]])
                    + fy * ((1.0 - fx) * slice[[y1, x0, k]] + fx * slice[[y1, x1, k]]);
                img[[r, c, k]] = (v * draw.jitter[k]).clamp(0.0, 255.0);
            }
        }
    }
    Ok((img, labels))
}

/// Draws and applies a random augmentation.
pub fn augment<R: Rng + ?Sized>(
    slice: ArrayView3<f64>,
    mask: ArrayView2<u8>,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<(Array3<f64>, Array2<u8>)> {
    let draw = AugmentDraw::sample(cfg, slice.dim().2, rng);
    apply_augment(slice, mask, &draw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub lambda_seg: f64,
    pub lambda_iou: f64,
    pub seed: u64,
    pub augmentation: AugmentConfig,
    pub tau: f64,
    /// Maximum random displacement, in pixels, of each training box side.
    #[serde(default)]
    pub box_jitter: usize,
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            epochs: 200,
            base_lr: 3e-5,
            batch_size: 2,
            lambda_seg: 1.0,
            lambda_iou: 1.0,
            seed: 0,
            augmentation: AugmentConfig::default(),
            tau: 0.5,
            box_jitter: 0,
        }
    }

    /// Short from-scratch schedule for the reduced model.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            base_lr: 2e-3,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            bad.push("base_lr must be > 0");
        }
        if !(self.lambda_seg >= 0.0 && self.lambda_iou >= 0.0) {
            bad.push("lambda_seg and lambda_iou must be >= 0");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            bad.push("tau must lie in (0, 1)");
        }
        let a = &self.augmentation;
        if !(a.rotate_deg >= 0.0 && a.scale.0 > 0.0 && a.scale.0 <= a.scale.1 && (0.0..1.0).contains(&a.intensity_jitter_frac)) {
            bad.push("augmentation ranges are invalid");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate of the epoch's last update.
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_iou: f64,
    /// Validation Dice per sub-region; NaN without validation cases.
    pub dice: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub total_updates: usize,
}

pub const HISTORY_COLUMNS: [&str; 7] = ["epoch", "lr", "loss_ce", "loss_iou", "dice_ncr", "dice_ed", "dice_et"];

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = HISTORY_COLUMNS.join(",");
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.9e},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.epoch, r.lr, r.loss_ce, r.loss_iou, r.dice[0], r.dice[1], r.dice[2]
            ));
        }
        s
    }
}

/// One training example: a tumor-bearing slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct SliceRef {
    case: usize,
    z: usize,
}

fn tumor_slices(cases: &[CaseArchive]) -> Vec<SliceRef> {
    cases
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            c.gts
                .axis_iter(Axis(0))
                .enumerate()
                .filter(|(_, s)| s.iter().any(|&v| v != 0))
                .map(move |(z, _)| SliceRef { case: i, z })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Deterministic per-sample generator from `(seed, epoch, index)`.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn jitter_box<R: Rng + ?Sized>(b: BBox, jitter: usize, h: usize, w: usize, rng: &mut R) -> BBox {
    if jitter == 0 {
        return b;
    }
    let j = jitter as i64;
    let mut shift = |v: usize, lo: usize, hi: usize| {
        let d = rng.random_range(-j..=j);
        (v as i64 + d).clamp(lo as i64, hi as i64) as usize
    };
    let row_min = shift(b.row_min, 0, b.row_max);
    let col_min = shift(b.col_min, 0, b.col_max);
    let row_max = shift(b.row_max, row_min, h - 1);
    let col_max = shift(b.col_max, col_min, w - 1);
    BBox {
        row_min,
        col_min,
        row_max,
        col_max,
    }
}

/// Per-sample gradients and loss components.
pub struct SampleStep {
    pub model_grads: Vec<Option<Tensor>>,
    pub attention_grads: Vec<Option<Tensor>>,
    pub loss: f64,
    pub ce: f64,
    pub iou: f64,
}

/// Where the second-pass box prompt comes from.
pub enum PromptSource<'a> {
    /// A fixed box; `None` skips the second pass.
    Given(Option<BBox>),
    /// The box around the sub-region in the combined first-pass prediction,
    /// with each edge shifted by up to `jitter` pixels.
    FirstPass { jitter: usize, rng: &'a mut ChaCha8Rng },
}

/// Forward and backward for one slice and one sub-region target. With
/// prompting, the loss averages the unprompted pass over mean-fused features
/// and the box-prompted pass over the sub-region's fused features.
#[allow(clippy::too_many_arguments)]
pub fn sample_step(
    model: &Model,
    attention: &AttentionParams,
    slice: &Tensor,
    region: SubRegion,
    target: &Tensor,
    prompt: PromptSource<'_>,
    variant: Variant,
    cfg: &TrainConfig,
) -> Result<SampleStep> {
    let mut g = Graph::new();
    let enc = model.encode_graph(&mut g, slice)?;
    let fused = if variant.attention {
        attend_graph(&mut g, attention, &enc)?[region.index()]
    } else {
        mean_graph(&mut g, &enc)?
    };
    let no_prompt = model.prompt_graph(&mut g, None)?;
    let mut parts = Vec::new();
    if variant.prompting {
        let mean = if variant.attention { mean_graph(&mut g, &enc)? } else { fused };
        let first = model.decode_graph(&mut g, mean.main, mean.skip, no_prompt, region)?;
        parts.push(combined_loss_graph(&mut g, first, target, cfg.lambda_seg, cfg.lambda_iou));
        let bbox = match prompt {
            PromptSource::Given(b) => b,
            PromptSource::FirstPass { jitter, rng } => {
                let (h, w) = model.config().input_size;
                let mut probs: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros((0, 0)));
                for r in SubRegion::ALL {
                    let node = if r == region {
                        first
                    } else {
                        model.decode_graph(&mut g, mean.main, mean.skip, no_prompt, r)?
                    };
                    probs[r.index()] = sigmoid_map(g.value(node));
                }
                let labels = combine_subregions(&probs, cfg.tau)?;
                extract_bbox(labels.view(), region.label(), 0)?
                    .bbox
                    .map(|bb| jitter_box(bb, jitter, h, w, rng))
            }
        };
        if let Some(b) = bbox {
            let sparse = model.prompt_graph(&mut g, Some(&SpatialPrompt::new(b, region)))?;
            let second = model.decode_graph(&mut g, fused.main, fused.skip, sparse, region)?;
            parts.push(combined_loss_graph(&mut g, second, target, cfg.lambda_seg, cfg.lambda_iou));
        }
    } else {
        let only = model.decode_graph(&mut g, fused.main, fused.skip, no_prompt, region)?;
        parts.push(combined_loss_graph(&mut g, only, target, cfg.lambda_seg, cfg.lambda_iou));
    }
    let k = parts.len() as f64;
    let totals: Vec<NodeId> = parts.iter().map(|p| p.total).collect();
    let sum = totals[1..].iter().fold(totals[0], |acc, &t| g.add(acc, t));
    let loss = g.scale(sum, 1.0 / k);
    let value = g.value(loss).item();
    let ce = parts.iter().map(|p| g.value(p.ce).item()).sum::<f64>() / k;
    let iou = parts.iter().map(|p| g.value(p.iou).item()).sum::<f64>() / k;
    let grads = g.backward(loss);
    Ok(SampleStep {
        model_grads: g.param_grads(model.store(), &grads),
        attention_grads: g.param_grads(attention.store(), &grads),
        loss: value,
        ce,
        iou,
    })
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        if let Some(g) = g {
            match a {
                Some(t) => t.add_assign(&g),
                None => *a = Some(g),
            }
        }
    }
}

fn case_slice(case: &CaseArchive, z: usize) -> (Array3<f64>, Array2<u8>) {
    let img = case.imgs.index_axis(Axis(0), z).mapv(f64::from);
    let mask = case.gts.index_axis(Axis(0), z).to_owned();
    (img, mask)
}

fn hwm_to_chw(a: &Array3<f64>) -> Tensor {
    let (h, w, m) = a.dim();
    Tensor::new(&[m, h, w], a.view().permuted_axes([2, 0, 1]).iter().copied().collect())
}

struct Sample {
    slice: Tensor,
    region: SubRegion,
    target: Tensor,
    rng: ChaCha8Rng,
}

/// Augmented, resized slice and its one-vs-all target for training sample
/// `index` of `epoch`.
fn prepare_sample(
    case: &CaseArchive,
    z: usize,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
    (ih, iw): (usize, usize),
) -> Result<Sample> {
    let mut rng = sample_rng(cfg.seed, epoch, index);
    let (img, mask) = case_slice(case, z);
    let (img, mask) = augment(img.view(), mask.view(), &mut rng, &cfg.augmentation)?;
    let slice = resize_slice(&hwm_to_chw(&img), ih, iw);
    let mask = resize_labels(mask.view(), ih, iw);
    let (region, target) = sample_subregion_target(mask.view(), &mut rng);
    let target = Tensor::new(&[ih, iw], target.into_raw_vec_and_offset().0);
    Ok(Sample {
        slice,
        region,
        target,
        rng,
    })
}

/// Sub-regions that [`train`] targets during `epoch`, in visiting order,
/// for a model input of `input_size`.
pub fn epoch_targets(
    train_cases: &[CaseArchive],
    cfg: &TrainConfig,
    epoch: usize,
    input_size: (usize, usize),
) -> Result<Vec<SubRegion>> {
    let slices = tumor_slices(train_cases);
    let order = epoch_order(&slices, cfg.seed, epoch);
    order
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(prepare_sample(&train_cases[s.case], s.z, cfg, epoch, i, input_size)?.region))
        .collect()
}

/// Visiting order of `epoch`: the shuffles of all earlier epochs are drawn
/// from one generator seeded with `seed`.
fn epoch_order(slices: &[SliceRef], seed: u64, epoch: usize) -> Vec<SliceRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = slices.to_vec();
    for _ in 0..=epoch {
        order = slices.to_vec();
        order.shuffle(&mut rng);
    }
    order
}

/// Mean per-sub-region Dice of the variant's predictions over `cases`.
pub fn validation_dice(
    model: &Model,
    attention: &AttentionParams,
    cases: &[CaseArchive],
    variant: Variant,
    tau: f64,
) -> Result<[f64; 3]> {
    if cases.is_empty() {
        return Ok([f64::NAN; 3]);
    }
    let opts = SegmentOptions {
        tau,
        variant,
        ..SegmentOptions::default()
    };
    let mut sums = [0.0; 3];
    for case in cases {
        let pred = segment_volume(model, attention, &case.volume(), &opts)?.mask;
        for r in SubRegion::ALL {
            let p = pred.labels().mapv(|v| v == r.label());
            let g = case.gts.mapv(|v| v == r.label());
            sums[r.index()] += dice(p.view(), g.view())?;
        }
    }
    Ok(sums.map(|s| s / cases.len() as f64))
}

/// Progress callback payload.
#[derive(Clone, Debug)]
pub struct Progress<'a> {
    pub record: &'a EpochRecord,
    pub epochs: usize,
}

/// Trains `model` and `attention` in place. Each epoch visits every
/// tumor-bearing slice of `train_cases` once in shuffled order, in batches
/// of `batch_size` samples whose gradients are averaged.
pub fn train(
    model: &mut Model,
    attention: &mut AttentionParams,
    train_cases: &[CaseArchive],
    val_cases: &[CaseArchive],
    cfg: &TrainConfig,
    variant: Variant,
    mut progress: impl FnMut(Progress),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_cases.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let m = model.config().in_channels;
    if let Some(c) = train_cases.iter().chain(val_cases).find(|c| c.imgs.dim().3 != m) {
        return Err(Error::input(format!(
            "case has {} modalities, model expects {m}",
            c.imgs.dim().3
        )));
    }
    let slices = tumor_slices(train_cases);
    if slices.is_empty() {
        return Err(Error::input("training set contains no labeled slices"));
    }
    let (ih, iw) = model.config().input_size;
    let per_epoch = slices.len().div_ceil(cfg.batch_size);
    let updates = per_epoch * cfg.epochs;
    let mut model_opt = Adam::new(model.store());
    let mut attn_opt = Adam::new(attention.store());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory {
        records: Vec::with_capacity(cfg.epochs),
        total_updates: updates,
    };
    let mut update = 0;
    for epoch in 0..cfg.epochs {
        let mut order = slices.clone();
        order.shuffle(&mut order_rng);
        let (mut ce_sum, mut iou_sum) = (0.0, 0.0);
        let mut lr = cfg.base_lr;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut mg: Vec<Option<Tensor>> = vec![None; model.store().len()];
            let mut ag: Vec<Option<Tensor>> = vec![None; attention.store().len()];
            for (k, s) in batch.iter().enumerate() {
                let mut smp = prepare_sample(&train_cases[s.case], s.z, cfg, epoch, b * cfg.batch_size + k, (ih, iw))?;
                let region = smp.region;
                let prompt = PromptSource::FirstPass {
                    jitter: cfg.box_jitter,
                    rng: &mut smp.rng,
                };
                let step = sample_step(model, attention, &smp.slice, region, &smp.target, prompt, variant, cfg)?;
                if !step.loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch}, batch {b}, case {}, slice {}, sub-region {region}",
                        s.case, s.z
                    )));
                }
                ce_sum += step.ce;
                iou_sum += step.iou;
                accumulate(&mut mg, step.model_grads);
                accumulate(&mut ag, step.attention_grads);
            }
            let inv = 1.0 / batch.len() as f64;
            for t in mg.iter_mut().chain(ag.iter_mut()).flatten() {
                t.scale_assign(inv);
            }
            lr = schedule_lr(update, updates, cfg.base_lr);
            model_opt.step(model.store_mut(), &mg, lr);
            attn_opt.step(attention.store_mut(), &ag, lr);
            update += 1;
        }
        let n = slices.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss_ce: ce_sum / n,
            loss_iou: iou_sum / n,
            dice: validation_dice(model, attention, val_cases, variant, cfg.tau)?,
        };
        progress(Progress {
            record: &record,
            epochs: cfg.epochs,
        });
        history.records.push(record);
    }
    Ok(history)
}
