//! Synthetic multi-modal tumor phantoms: three nested balls with per-modality
//! intensity signatures on a flat background.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Modality, SubRegion};
use crate::volume_io::{CaseArchive, MultiModalVolume, SegmentationMask};

/// Mean intensity per modality (T1, T1c, T2, FLAIR) on the `[0, 255]` scale.
pub const BACKGROUND_SIGNATURE: [f64; 4] = [80.0, 80.0, 80.0, 80.0];
pub const EDEMA_SIGNATURE: [f64; 4] = [100.0, 100.0, 200.0, 210.0];
pub const ENHANCING_SIGNATURE: [f64; 4] = [110.0, 220.0, 150.0, 150.0];
pub const NECROTIC_SIGNATURE: [f64; 4] = [90.0, 40.0, 160.0, 220.0];

pub fn signature(label: u8) -> [f64; 4] {
    match label {
        1 => NECROTIC_SIGNATURE,
        2 => EDEMA_SIGNATURE,
        4 => ENHANCING_SIGNATURE,
        _ => BACKGROUND_SIGNATURE,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(depth, height, width)`
    pub size: (usize, usize, usize),
    /// Voxel coordinates `(z, y, x)` of the tumor center.
    pub tumor_center: (f64, f64, f64),
    /// `(edema, enhancing, necrotic)` radii in voxels, strictly decreasing.
    pub radii: (f64, f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: (24, 64, 64),
            tumor_center: (12.0, 32.0, 32.0),
            radii: (10.0, 6.5, 3.5),
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (re, rt, rn) = self.radii;
        if !(re > rt && rt > rn && rn > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "radii must satisfy edema > enhancing > necrotic > 0, got {:?}",
                self.radii
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        let (d, h, w) = self.size;
        let (cz, cy, cx) = self.tumor_center;
        for (c, n, axis) in [(cz, d, "depth"), (cy, h, "height"), (cx, w, "width")] {
            if n == 0 || c - re < 0.0 || c + re > (n - 1) as f64 {
                return Err(Error::InvalidSpec(format!(
                    "tumor of radius {re} at {c} does not fit along {axis} (size {n})"
                )));
            }
        }
        Ok(())
    }

    /// Label of voxel `(z, y, x)` from the nested-ball rule.
    pub fn label_at(&self, z: usize, y: usize, x: usize) -> u8 {
        let (cz, cy, cx) = self.tumor_center;
        let d2 = (z as f64 - cz).powi(2) + (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
        let (re, rt, rn) = self.radii;
        if d2 <= rn * rn {
            SubRegion::Ncr.label()
        } else if d2 <= rt * rt {
            SubRegion::Et.label()
        } else if d2 <= re * re {
            SubRegion::Ed.label()
        } else {
            0
        }
    }
}

/// Builds a phantom volume and its labels. Noise is additive Gaussian with
/// `noise_sigma`, clipped back into `[0, 255]`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(MultiModalVolume, SegmentationMask)> {
    spec.validate()?;
    let (d, h, w) = spec.size;
    let labels = Array3::from_shape_fn((d, h, w), |(z, y, x)| spec.label_at(z, y, x));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let mut data = Array4::zeros((d, h, w, 4));
    for ((z, y, x, m), v) in data.indexed_iter_mut() {
        let mean = signature(labels[[z, y, x]])[m];
        let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        *v = (mean + n).clamp(0.0, 255.0);
    }
    let volume = MultiModalVolume::new(data, [1.0; 3], Modality::ORDER.to_vec())?;
    Ok((volume, SegmentationMask::new(labels)?))
}

/// Per-case randomization applied around a base spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomRanges {
    /// Maximum center displacement in voxels along each axis.
    pub center_jitter: (f64, f64, f64),
    /// All radii are scaled by a factor drawn from `[1 - j, 1 + j]`.
    pub radius_jitter: f64,
    /// Noise sigma drawn uniformly from this interval.
    pub noise_range: (f64, f64),
}

impl PhantomRanges {
    pub fn none(noise_sigma: f64) -> Self {
        Self {
            center_jitter: (0.0, 0.0, 0.0),
            radius_jitter: 0.0,
            noise_range: (noise_sigma, noise_sigma),
        }
    }

    /// Center moves up to a quarter of each in-plane extent, radii ±10 %.
    pub fn standard(spec: &PhantomSpec) -> Self {
        let (d, h, w) = spec.size;
        Self {
            center_jitter: (d as f64 * 0.1, h as f64 * 0.25, w as f64 * 0.25),
            radius_jitter: 0.1,
            noise_range: (spec.noise_sigma, spec.noise_sigma),
        }
    }
}

fn draw_case_spec(base: &PhantomSpec, ranges: &PhantomRanges, index: usize, rng: &mut ChaCha8Rng) -> PhantomSpec {
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    let scale = uniform(rng, 1.0 - ranges.radius_jitter, 1.0 + ranges.radius_jitter);
    let radii = (base.radii.0 * scale, base.radii.1 * scale, base.radii.2 * scale);
    let (d, h, w) = base.size;
    let mut center = [base.tumor_center.0, base.tumor_center.1, base.tumor_center.2];
    let jitter = [ranges.center_jitter.0, ranges.center_jitter.1, ranges.center_jitter.2];
    for (axis, n) in [d, h, w].into_iter().enumerate() {
        let c = center[axis] + uniform(rng, -jitter[axis], jitter[axis]);
        // keep the whole edema ball inside the volume
        let lo = radii.0;
        let hi = (n - 1) as f64 - radii.0;
        center[axis] = if lo <= hi { c.clamp(lo, hi) } else { (n - 1) as f64 / 2.0 };
    }
    let noise_sigma = uniform(rng, ranges.noise_range.0, ranges.noise_range.1);
    PhantomSpec {
        size: base.size,
        tumor_center: (center[0], center[1], center[2]),
        radii,
        noise_sigma,
        seed: base.seed.wrapping_add(index as u64),
    }
}

/// Specs for `n_cases` phantoms. Geometry and noise level are drawn from
/// `seed`; the noise stream of case `i` is seeded with `base.seed + i`.
pub fn dataset_specs(n_cases: usize, base: &PhantomSpec, ranges: &PhantomRanges, seed: u64) -> Result<Vec<PhantomSpec>> {
    if n_cases == 0 {
        return Err(Error::InvalidSpec("n_cases must be at least 1".into()));
    }
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<PhantomSpec> = (0..n_cases)
        .map(|i| draw_case_spec(base, ranges, i, &mut rng))
        .collect();
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

pub fn generate_dataset(
    n_cases: usize,
    base: &PhantomSpec,
    ranges: &PhantomRanges,
    seed: u64,
) -> Result<Vec<CaseArchive>> {
    dataset_specs(n_cases, base, ranges, seed)?
        .iter()
        .map(|s| {
            let (v, m) = generate_phantom(s)?;
            CaseArchive::from_volume(&v, &m)
        })
        .collect()
}
