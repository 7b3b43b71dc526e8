//! Volumetric overlap metrics, composite tumor regions, data splits and the
//! signed-rank test.

use std::fmt;

use ndarray::{Array3, ArrayView3, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::attention::{AttentionParams, AttentionWeights};
use crate::error::{Error, Result};
use crate::labels::is_valid_label;
use crate::model::Model;
use crate::prompting::{segment_volume, SegmentOptions};
use crate::volume_io::{CaseArchive, SegmentationMask};

fn check_shapes(a: &ArrayView3<bool>, b: &ArrayView3<bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::input(format!("mask shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

fn counts(pred: ArrayView3<bool>, gt: ArrayView3<bool>) -> (usize, usize, usize) {
    let (mut inter, mut p, mut g) = (0, 0, 0);
    Zip::from(&pred).and(&gt).for_each(|&a, &b| {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    });
    (inter, p, g)
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: ArrayView3<bool>, gt: ArrayView3<bool>) -> Result<f64> {
    check_shapes(&pred, &gt)?;
    let (i, p, g) = counts(pred, gt);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`; two empty masks score 1.
pub fn iou(pred: ArrayView3<bool>, gt: ArrayView3<bool>) -> Result<f64> {
    check_shapes(&pred, &gt)?;
    let (i, p, g) = counts(pred, gt);
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Regions scored per case: the three labeled sub-regions and two composites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalRegion {
    Ncr,
    Ed,
    Et,
    Wt,
    Tc,
}

impl EvalRegion {
    pub const ALL: [EvalRegion; 5] = [EvalRegion::Ncr, EvalRegion::Ed, EvalRegion::Et, EvalRegion::Wt, EvalRegion::Tc];

    pub fn name(self) -> &'static str {
        match self {
            EvalRegion::Ncr => "NCR",
            EvalRegion::Ed => "ED",
            EvalRegion::Et => "ET",
            EvalRegion::Wt => "WT",
            EvalRegion::Tc => "TC",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::input(format!("unknown region `{s}`")))
    }

    fn labels(self) -> &'static [u8] {
        match self {
            EvalRegion::Ncr => &[1],
            EvalRegion::Ed => &[2],
            EvalRegion::Et => &[4],
            EvalRegion::Wt => &[1, 2, 4],
            EvalRegion::Tc => &[1, 4],
        }
    }

    pub fn mask(self, labels: ArrayView3<u8>) -> Array3<bool> {
        let set = self.labels();
        labels.map(|v| set.contains(v))
    }
}

impl fmt::Display for EvalRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeMasks {
    pub wt: Array3<bool>,
    pub tc: Array3<bool>,
    pub et: Array3<bool>,
}

/// Whole tumor `{1,2,4}`, tumor core `{1,4}`, enhancing tumor `{4}`.
pub fn composite_masks(labels: ArrayView3<u8>) -> Result<CompositeMasks> {
    if let Some(bad) = labels.iter().find(|&&v| !is_valid_label(v)) {
        return Err(Error::input(format!("invalid label {bad} in mask")));
    }
    Ok(CompositeMasks {
        wt: EvalRegion::Wt.mask(labels),
        tc: EvalRegion::Tc.mask(labels),
        et: EvalRegion::Et.mask(labels),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    /// Indexed like [`EvalRegion::ALL`].
    pub dice: [f64; 5],
    pub iou: [f64; 5],
}

/// Scores a predicted label volume against ground truth.
pub fn score_case(case_id: &str, pred: ArrayView3<u8>, gt: ArrayView3<u8>) -> Result<CaseMetrics> {
    if pred.dim() != gt.dim() {
        return Err(Error::input(format!("prediction {:?} and ground truth {:?} differ in shape", pred.dim(), gt.dim())));
    }
    composite_masks(pred)?;
    composite_masks(gt)?;
    let mut out = CaseMetrics {
        case_id: case_id.to_string(),
        dice: [0.0; 5],
        iou: [0.0; 5],
    };
    for r in EvalRegion::ALL {
        let (p, g) = (r.mask(pred), r.mask(gt));
        out.dice[r.index()] = dice(p.view(), g.view())?;
        out.iou[r.index()] = iou(p.view(), g.view())?;
    }
    Ok(out)
}

/// Mean and population standard deviation; `(NaN, NaN)` for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub fold: usize,
    pub seed: u64,
    pub cases: Vec<CaseMetrics>,
    /// `(case_id, reason)` for cases whose inference failed.
    pub failed: Vec<(String, String)>,
}

pub const REPORT_COLUMNS: [&str; 7] = ["case_id", "region", "dice", "iou", "variant", "fold", "seed"];

impl MetricsReport {
    pub fn new(variant: impl Into<String>, fold: usize, seed: u64) -> Self {
        Self {
            variant: variant.into(),
            fold,
            seed,
            cases: Vec::new(),
            failed: Vec::new(),
        }
    }

    pub fn case_count(&self) -> usize {
        self.cases.len()
    }

    pub fn dice_values(&self, r: EvalRegion) -> Vec<f64> {
        self.cases.iter().map(|c| c.dice[r.index()]).collect()
    }

    pub fn iou_values(&self, r: EvalRegion) -> Vec<f64> {
        self.cases.iter().map(|c| c.iou[r.index()]).collect()
    }

    pub fn dice_summary(&self, r: EvalRegion) -> (f64, f64) {
        mean_std(&self.dice_values(r))
    }

    pub fn iou_summary(&self, r: EvalRegion) -> (f64, f64) {
        mean_std(&self.iou_values(r))
    }

    /// Long-format CSV, one row per case and region.
    pub fn to_csv(&self) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        s.push_str(&self.csv_rows());
        s
    }

    /// CSV rows without the header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            for r in EvalRegion::ALL {
                s.push_str(&format!(
                    "{},{},{:.6},{:.6},{},{},{}\n",
                    c.case_id,
                    r.name(),
                    c.dice[r.index()],
                    c.iou[r.index()],
                    self.variant,
                    self.fold,
                    self.seed
                ));
            }
        }
        s
    }
}

/// Segments and scores every case. Failures are recorded, not fatal.
pub fn evaluate_dataset(
    model: &Model,
    attention: &AttentionParams,
    cases: &[(String, CaseArchive)],
    opts: &SegmentOptions,
    fold: usize,
    seed: u64,
) -> Result<MetricsReport> {
    evaluate_with_attention(model, attention, cases, opts, fold, seed).map(|(r, _)| r)
}

/// Per-case attention weights, `(case_id, [(slice, α)])`.
pub type CaseAttention = Vec<(String, Vec<(usize, AttentionWeights)>)>;

/// [`evaluate_dataset`] that also returns the attention weights of every
/// successfully segmented case.
pub fn evaluate_with_attention(
    model: &Model,
    attention: &AttentionParams,
    cases: &[(String, CaseArchive)],
    opts: &SegmentOptions,
    fold: usize,
    seed: u64,
) -> Result<(MetricsReport, CaseAttention)> {
    if cases.is_empty() {
        return Err(Error::input("no cases to evaluate"));
    }
    opts.validate()?;
    let results: Vec<_> = cases
        .par_iter()
        .map(|(id, case)| {
            segment_volume(model, attention, &case.volume(), opts)
                .and_then(|out| Ok((score_case(id, out.mask.labels().view(), case.gts.view())?, out.alphas)))
                .map_err(|e| (id.clone(), e.to_string()))
        })
        .collect();
    let mut report = MetricsReport::new(opts.variant.name(), fold, seed);
    let mut alphas = Vec::new();
    for r in results {
        match r {
            Ok((m, a)) => {
                alphas.push((m.case_id.clone(), a));
                report.cases.push(m);
            }
            Err(f) => report.failed.push(f),
        }
    }
    Ok((report, alphas))
}

/// Scores precomputed predictions against their ground truth.
pub fn evaluate_predictions(
    pairs: &[(String, SegmentationMask, SegmentationMask)],
    variant: &str,
    fold: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::new(variant, fold, seed);
    for (id, pred, gt) in pairs {
        report.cases.push(score_case(id, pred.labels().view(), gt.labels().view())?);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// `(train, test)` ids for fold `i`.
    pub fn train_test(&self, i: usize) -> (Vec<String>, Vec<String>) {
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        (train, self.folds[i].clone())
    }

    /// Hex SHA-256 over the fold contents.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (i, f) in self.folds.iter().enumerate() {
            h.update(format!("fold{i}:"));
            for id in f {
                h.update(id.as_bytes());
                h.update(b"\n");
            }
        }
        format!("{:x}", h.finalize())
    }
}

fn shuffled(ids: &[String], seed: u64) -> Vec<String> {
    let mut v = ids.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Seeded shuffle, then contiguous folds; the first `n % k` folds hold one
/// extra case.
pub fn kfold_split(case_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    let n = case_ids.len();
    if k == 0 || k > n {
        return Err(Error::input(format!("cannot split {n} cases into {k} folds")));
    }
    let ids = shuffled(case_ids, seed);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        folds.push(ids[start..start + len].to_vec());
        start += len;
    }
    Ok(FoldSplit { folds })
}

/// Seeded hold-out split; `train_fraction` of the cases (rounded, at least
/// one on each side when possible) go to training.
pub fn train_test_split(case_ids: &[String], train_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::input(format!("split fraction must lie in (0, 1], got {train_fraction}")));
    }
    let n = case_ids.len();
    if n == 0 {
        return Err(Error::input("no cases to split"));
    }
    let mut n_train = (n as f64 * train_fraction).round() as usize;
    if train_fraction < 1.0 && n > 1 {
        n_train = n_train.clamp(1, n - 1);
    }
    let n_train = n_train.clamp(1, n);
    let ids = shuffled(case_ids, seed);
    Ok((ids[..n_train].to_vec(), ids[n_train..].to_vec()))
}

/// Largest `n` handled by the exact null distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided signed-rank test of paired scores. Zero differences are
/// dropped; exact below [`WILCOXON_EXACT_MAX`], normal approximation with
/// tie and continuity correction above.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!("paired lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::input("no paired scores"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Ok(1.0);
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let n = d.len();
    let p = if n <= WILCOXON_EXACT_MAX {
        exact_p(&ranks, w_plus)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = Vec::new();
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
            ties.push(j as f64);
            i += j;
        }
        let tie_term: f64 = ties.iter().map(|t| t * t * t - t).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        if var <= 0.0 {
            return Ok(1.0);
        }
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        2.0 * (1.0 - normal.cdf(z))
    };
    Ok(p.min(1.0))
}

/// Exact two-sided p from the distribution of the positive-rank sum under
/// random signs. Ranks are doubled so that half-integer ties stay integral.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut dist = vec![0.0f64; total + 1];
    dist[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            dist[s] += dist[s - r];
        }
    }
    let scale = 0.5f64.powi(ranks.len() as i32);
    let w = (w_plus * 2.0).round() as usize;
    let lower: f64 = dist[..=w].iter().sum::<f64>() * scale;
    let upper: f64 = dist[w..].iter().sum::<f64>() * scale;
    2.0 * lower.min(upper)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_inside_block() {
        let mut gt = Array3::from_elem((4, 4, 4), false);
        let mut pred = gt.clone();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    gt[[z, y, x]] = true;
                }
            }
        }
        pred[[0, 0, 0]] = true;
        pred[[0, 0, 1]] = true;
        pred[[0, 1, 0]] = true;
        pred[[0, 1, 1]] = true;
        assert!((dice(pred.view(), gt.view()).unwrap() - 2.0 * 4.0 / 12.0).abs() < 1e-12);
        assert_eq!(iou(pred.view(), gt.view()).unwrap(), 0.5);
    }

    #[test]
    fn empty_masks_score_one() {
        let e = Array3::from_elem((2, 2, 2), false);
        assert_eq!(dice(e.view(), e.view()).unwrap(), 1.0);
        assert_eq!(iou(e.view(), e.view()).unwrap(), 1.0);
    }

    #[test]
    fn composite_rules() {
        let twos = Array3::from_elem((2, 2, 2), 2u8);
        let c = composite_masks(twos.view()).unwrap();
        assert!(c.wt.iter().all(|&v| v));
        assert!(!c.tc.iter().any(|&v| v) && !c.et.iter().any(|&v| v));
        let fours = Array3::from_elem((2, 2, 2), 4u8);
        let c = composite_masks(fours.view()).unwrap();
        assert!(c.wt.iter().chain(c.tc.iter()).chain(c.et.iter()).all(|&v| v));
        assert!(composite_masks(Array3::from_elem((1, 1, 1), 3u8).view()).is_err());
    }

    #[test]
    fn fold_sizes() {
        let ids: Vec<String> = (0..369).map(|i| format!("c{i}")).collect();
        let sizes: Vec<usize> = kfold_split(&ids, 5, 0).unwrap().folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![74, 74, 74, 74, 73]);
        assert!(kfold_split(&ids[..3], 5, 0).is_err());
    }

    #[test]
    fn wilcoxon_examples() {
        let a = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        assert_eq!(wilcoxon_signed_rank(&a, &a).unwrap(), 1.0);
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v - 0.01 * (i + 1) as f64).collect();
        assert!((wilcoxon_signed_rank(&a, &b).unwrap() - 0.03125).abs() < 1e-12);
        assert_eq!(wilcoxon_signed_rank(&a, &b).unwrap(), wilcoxon_signed_rank(&b, &a).unwrap());
        assert!(wilcoxon_signed_rank(&a, &b[..3]).is_err());
    }

    #[test]
    fn split_keeps_both_sides_nonempty() {
        let ids: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let (tr, te) = train_test_split(&ids, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (4, 1));
        let (tr, te) = train_test_split(&ids[..2], 0.99, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
    }
}
