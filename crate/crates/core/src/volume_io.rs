//! Volume ingestion, intensity preprocessing and the compressed case archive.
//!
//! Preprocessing per modality is percentile clipping followed by min-max
//! scaling into `[0, 255]`. Modalities are stacked in the fixed order
//! (T1, T1c, T2, FLAIR) and the depth axis is cropped to the slab of slices
//! that carry annotation (training) or any signal (inference).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{s, Array1, Array3, Array4, ArrayD, ArrayView3, Axis, Ix3};
use ndarray_npy::{NpzReader, NpzWriter, ReadNpzError};
use zip::write::SimpleFileOptions;
use zip::CompressionMethod;

use crate::error::{Error, Result};
use crate::labels::{is_valid_label, Modality};

/// Multi-modal intensity volume laid out `depth × height × width × modality`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    intensities: Array4<f64>,
    spacing: [f64; 3],
    modalities: Vec<Modality>,
}

impl MultiModalVolume {
    pub fn new(intensities: Array4<f64>, spacing: [f64; 3], modalities: Vec<Modality>) -> Result<Self> {
        let m = intensities.len_of(Axis(3));
        if m != modalities.len() {
            return Err(Error::input(format!(
                "modality axis has length {m} but {} modalities were named",
                modalities.len()
            )));
        }
        match m {
            4 if modalities == Modality::ORDER => {}
            4 => return Err(Error::input("multi-modal volumes must be ordered T1, T1c, T2, FLAIR")),
            1 => {}
            _ => return Err(Error::input(format!("modality axis must have length 4 or 1, got {m}"))),
        }
        validate_spacing(&spacing)?;
        if intensities.is_empty() {
            return Err(Error::input("volume is empty"));
        }
        Ok(Self {
            intensities,
            spacing,
            modalities,
        })
    }

    pub fn intensities(&self) -> &Array4<f64> {
        &self.intensities
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    /// `(depth, height, width)`
    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        let s = self.intensities.shape();
        (s[0], s[1], s[2])
    }

    /// True when every intensity lies in `[0, 255]`.
    pub fn is_normalized(&self) -> bool {
        self.intensities.iter().all(|&v| (0.0..=255.0).contains(&v))
    }

    /// Slice `z` in `modality × height × width` layout.
    pub fn slice_chw(&self, z: usize) -> Array3<f64> {
        self.intensities
            .index_axis(Axis(0), z)
            .permuted_axes([2, 0, 1])
            .to_owned()
    }

    /// Keeps a single modality, producing a one-channel volume.
    pub fn select_modality(&self, modality: Modality) -> Result<Self> {
        let idx = self
            .modalities
            .iter()
            .position(|&m| m == modality)
            .ok_or_else(|| Error::input(format!("volume has no {modality} channel")))?;
        let data = self.intensities.slice(s![.., .., .., idx..idx + 1]).to_owned();
        Self::new(data, self.spacing, vec![modality])
    }

    fn slab(&self, start: usize, end: usize) -> Self {
        Self {
            intensities: self.intensities.slice(s![start..end, .., .., ..]).to_owned(),
            spacing: self.spacing,
            modalities: self.modalities.clone(),
        }
    }
}

/// Label field over `{0, 1, 2, 4}`, `depth × height × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    labels: Array3<u8>,
}

impl SegmentationMask {
    pub fn new(labels: Array3<u8>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&v| !is_valid_label(v)) {
            return Err(Error::input(format!("label {bad} is outside {{0, 1, 2, 4}}")));
        }
        Ok(Self { labels })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            labels: Array3::zeros(shape),
        }
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn into_labels(self) -> Array3<u8> {
        self.labels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    /// Indices of slices holding at least one nonzero label.
    pub fn labeled_slices(&self) -> Vec<usize> {
        self.labels
            .outer_iter()
            .enumerate()
            .filter(|(_, sl)| sl.iter().any(|&v| v != 0))
            .map(|(z, _)| z)
            .collect()
    }
}

/// Preprocessed case as persisted on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseArchive {
    pub imgs: Array4<u8>,
    pub gts: Array3<u8>,
    pub spacing: [f64; 3],
}

impl CaseArchive {
    pub fn new(imgs: Array4<u8>, gts: Array3<u8>, spacing: [f64; 3]) -> Result<Self> {
        let archive = Self { imgs, gts, spacing };
        archive.validate()?;
        Ok(archive)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.imgs.len_of(Axis(3));
        if m != 4 && m != 1 {
            return Err(Error::format("imgs", format!("modality axis has length {m}")));
        }
        let s = self.imgs.shape();
        if (s[0], s[1], s[2]) != self.gts.dim() {
            return Err(Error::format(
                "gts",
                format!("shape {:?} does not match imgs {:?}", self.gts.dim(), &s[..3]),
            ));
        }
        if let Some(bad) = self.gts.iter().find(|&&v| !is_valid_label(v)) {
            return Err(Error::format("gts", format!("label {bad} outside {{0, 1, 2, 4}}")));
        }
        validate_spacing(&self.spacing).map_err(|e| Error::format("spacing", e))?;
        Ok(())
    }

    /// Quantizes a normalized volume (values in `[0, 255]`) with round-half-up.
    pub fn from_volume(volume: &MultiModalVolume, mask: &SegmentationMask) -> Result<Self> {
        if !volume.is_normalized() {
            return Err(Error::input("archive volumes must be normalized to [0, 255]"));
        }
        if volume.spatial_shape() != mask.shape() {
            return Err(Error::input("volume and mask shapes differ"));
        }
        let imgs = volume.intensities().mapv(quantize);
        Self::new(imgs, mask.labels().clone(), volume.spacing())
    }

    pub fn modalities(&self) -> Vec<Modality> {
        if self.imgs.len_of(Axis(3)) == 4 {
            Modality::ORDER.to_vec()
        } else {
            // single-channel archives do not record which sequence they hold
            vec![Modality::Flair]
        }
    }

    /// Keeps one channel. Single-channel archives are taken to hold the
    /// requested modality already.
    pub fn select_channel(&self, modality: Modality) -> Result<Self> {
        let channels = self.imgs.len_of(Axis(3));
        if channels == 1 {
            return Ok(self.clone());
        }
        let idx = modality.index();
        if idx >= channels {
            return Err(Error::input(format!("archive has no {modality} channel")));
        }
        Ok(Self {
            imgs: self.imgs.slice(s![.., .., .., idx..idx + 1]).to_owned(),
            gts: self.gts.clone(),
            spacing: self.spacing,
        })
    }

    pub fn volume(&self) -> MultiModalVolume {
        self.volume_with(self.modalities())
    }

    pub fn volume_with(&self, modalities: Vec<Modality>) -> MultiModalVolume {
        MultiModalVolume::new(self.imgs.mapv(f64::from), self.spacing, modalities)
            .expect("validated archive")
    }

    pub fn mask(&self) -> SegmentationMask {
        SegmentationMask {
            labels: self.gts.clone(),
        }
    }
}

fn validate_spacing(spacing: &[f64; 3]) -> Result<()> {
    if spacing.iter().all(|&v| v.is_finite() && v > 0.0) {
        Ok(())
    } else {
        Err(Error::input(format!("spacing must be strictly positive, got {spacing:?}")))
    }
}

/// Round half up, clamped to the 8-bit range.
pub fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Percentile by linear interpolation between closest ranks of sorted data.
pub fn percentile_of_sorted(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clamps a single-modality volume into its `[P_lo, P_hi]` percentile band.
pub fn clip_percentiles(volume: ArrayView3<f64>, lo_pct: f64, hi_pct: f64) -> Result<Array3<f64>> {
    if volume.is_empty() {
        return Err(Error::input("cannot clip an empty volume"));
    }
    if !(0.0..100.0).contains(&lo_pct) || !(lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::input(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}"
        )));
    }
    let mut sorted: Vec<f64> = volume.iter().copied().collect();
    if sorted.iter().any(|v| v.is_nan()) {
        return Err(Error::input("volume contains NaN"));
    }
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_of_sorted(&sorted, lo_pct);
    let hi = percentile_of_sorted(&sorted, hi_pct);
    Ok(volume.mapv(|v| v.clamp(lo, hi)))
}

/// Affine map of `[min, max]` onto `[0, 255]`; a constant volume maps to zeros.
pub fn minmax_normalize(volume: ArrayView3<f64>) -> Result<Array3<f64>> {
    if volume.is_empty() {
        return Err(Error::input("cannot normalize an empty volume"));
    }
    let (min, max) = volume
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = max - min;
    if range <= 0.0 || !range.is_finite() {
        return Ok(Array3::zeros(volume.dim()));
    }
    Ok(volume.mapv(|v| ((v - min) / range * 255.0).clamp(0.0, 255.0)))
}

pub fn normalize_modality(volume: ArrayView3<f64>, lo_pct: f64, hi_pct: f64) -> Result<Array3<f64>> {
    let clipped = clip_percentiles(volume, lo_pct, hi_pct)?;
    minmax_normalize(clipped.view())
}

/// Stacks four single-modality volumes in T1, T1c, T2, FLAIR order.
pub fn stack_modalities(volumes: &[Array3<f64>], spacing: [f64; 3]) -> Result<MultiModalVolume> {
    if volumes.len() != 4 {
        return Err(Error::input(format!("expected 4 modalities, got {}", volumes.len())));
    }
    let shape = volumes[0].dim();
    if volumes.iter().any(|v| v.dim() != shape) {
        return Err(Error::input("modalities differ in spatial shape"));
    }
    let views: Vec<_> = volumes.iter().map(|v| v.view().insert_axis(Axis(3))).collect();
    let stacked = ndarray::concatenate(Axis(3), &views).expect("shapes checked");
    MultiModalVolume::new(stacked, spacing, Modality::ORDER.to_vec())
}

/// Crops depth to the minimal slab covering every labeled slice. Returns the
/// cropped pair and the index of the first kept slice; an unlabeled case is
/// returned whole with offset 0.
pub fn crop_to_labeled_roi(
    volume: &MultiModalVolume,
    mask: &SegmentationMask,
) -> Result<(MultiModalVolume, SegmentationMask, usize)> {
    if volume.spatial_shape() != mask.shape() {
        return Err(Error::input(format!(
            "volume shape {:?} does not match mask shape {:?}",
            volume.spatial_shape(),
            mask.shape()
        )));
    }
    let labeled = mask.labeled_slices();
    let (Some(&first), Some(&last)) = (labeled.first(), labeled.last()) else {
        return Ok((volume.clone(), mask.clone(), 0));
    };
    let cropped_mask = SegmentationMask {
        labels: mask.labels.slice(s![first..=last, .., ..]).to_owned(),
    };
    Ok((volume.slab(first, last + 1), cropped_mask, first))
}

/// Inference-time slab: slices with any nonzero intensity in any modality.
pub fn crop_to_signal_roi(volume: &MultiModalVolume) -> (MultiModalVolume, usize) {
    let active: Vec<usize> = volume
        .intensities()
        .outer_iter()
        .enumerate()
        .filter(|(_, sl)| sl.iter().any(|&v| v != 0.0))
        .map(|(z, _)| z)
        .collect();
    match (active.first(), active.last()) {
        (Some(&a), Some(&b)) => (volume.slab(a, b + 1), a),
        _ => (volume.clone(), 0),
    }
}

pub(crate) fn npz_options() -> SimpleFileOptions {
    SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(zip::DateTime::default())
}

pub(crate) fn open_npz(path: &Path) -> Result<NpzReader<BufReader<File>>> {
    let file = File::open(path)?;
    NpzReader::new(BufReader::new(file)).map_err(|e| Error::format("<archive>", e))
}

fn read_key<A>(npz: &mut NpzReader<BufReader<File>>, key: &str) -> Result<A>
where
    A: NpzArray,
{
    A::read(npz, key).map_err(|e| match e {
        ReadNpzError::Zip(zip::result::ZipError::FileNotFound) => Error::format(key, "missing key"),
        other => Error::format(key, other),
    })
}

trait NpzArray: Sized {
    fn read(npz: &mut NpzReader<BufReader<File>>, key: &str) -> std::result::Result<Self, ReadNpzError>;
}

macro_rules! npz_array {
    ($t:ty) => {
        impl NpzArray for $t {
            fn read(
                npz: &mut NpzReader<BufReader<File>>,
                key: &str,
            ) -> std::result::Result<Self, ReadNpzError> {
                npz.by_name(key)
            }
        }
    };
}
npz_array!(Array4<u8>);
npz_array!(Array3<u8>);
npz_array!(Array1<f64>);
npz_array!(ArrayD<f64>);
npz_array!(ArrayD<f32>);
npz_array!(ArrayD<i16>);
npz_array!(ArrayD<u16>);
npz_array!(ArrayD<i32>);
npz_array!(ArrayD<u8>);
npz_array!(Array1<u8>);

/// Writes `imgs`, `gts` and `spacing` into a compressed npz container.
pub fn save_case(archive: &CaseArchive, path: &Path) -> Result<()> {
    archive.validate()?;
    let file = BufWriter::new(File::create(path)?);
    let mut npz = NpzWriter::new_with_options(file, npz_options());
    let spacing = Array1::from(archive.spacing.to_vec());
    let io = |e: ndarray_npy::WriteNpzError| Error::Io(std::io::Error::other(e.to_string()));
    npz.add_array("imgs", &archive.imgs).map_err(io)?;
    npz.add_array("gts", &archive.gts).map_err(io)?;
    npz.add_array("spacing", &spacing).map_err(io)?;
    npz.finish().map_err(io)?;
    Ok(())
}

pub fn load_case(path: &Path) -> Result<CaseArchive> {
    let mut npz = open_npz(path)?;
    let imgs: Array4<u8> = read_key(&mut npz, "imgs")?;
    let gts: Array3<u8> = read_key(&mut npz, "gts")?;
    let spacing = read_spacing(&mut npz)?;
    let archive = CaseArchive { imgs, gts, spacing };
    archive.validate()?;
    Ok(archive)
}

fn read_spacing(npz: &mut NpzReader<BufReader<File>>) -> Result<[f64; 3]> {
    let spacing: Array1<f64> = read_key(npz, "spacing")?;
    if spacing.len() != 3 {
        return Err(Error::format("spacing", format!("expected 3 values, got {}", spacing.len())));
    }
    Ok([spacing[0], spacing[1], spacing[2]])
}

/// Stores a predicted label volume under key `pred`, with `spacing`.
pub fn save_prediction(mask: &SegmentationMask, spacing: [f64; 3], path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut npz = NpzWriter::new_with_options(file, npz_options());
    let io = |e: ndarray_npy::WriteNpzError| Error::Io(std::io::Error::other(e.to_string()));
    npz.add_array("pred", mask.labels()).map_err(io)?;
    npz.add_array("spacing", &Array1::from(spacing.to_vec())).map_err(io)?;
    npz.finish().map_err(io)?;
    Ok(())
}

pub fn load_prediction(path: &Path) -> Result<(SegmentationMask, [f64; 3])> {
    let mut npz = open_npz(path)?;
    let pred: Array3<u8> = read_key(&mut npz, "pred")?;
    let spacing = read_spacing(&mut npz)?;
    let mask = SegmentationMask::new(pred).map_err(|e| Error::format("pred", e))?;
    Ok((mask, spacing))
}

/// Unnormalized input case: one real-valued array per modality and an
/// optional label volume.
#[derive(Clone, Debug)]
pub struct RawCase {
    pub modalities: Vec<(Modality, Array3<f64>)>,
    pub seg: Option<Array3<u8>>,
    pub spacing: [f64; 3],
}

fn read_real_3d(npz: &mut NpzReader<BufReader<File>>, key: &str) -> Result<Array3<f64>> {
    let arr: ArrayD<f64> = if let Ok(a) = ArrayD::<f64>::read(npz, key) {
        a
    } else if let Ok(a) = ArrayD::<f32>::read(npz, key) {
        a.mapv(f64::from)
    } else if let Ok(a) = ArrayD::<i16>::read(npz, key) {
        a.mapv(f64::from)
    } else if let Ok(a) = ArrayD::<u16>::read(npz, key) {
        a.mapv(f64::from)
    } else if let Ok(a) = ArrayD::<i32>::read(npz, key) {
        a.mapv(f64::from)
    } else {
        read_key::<ArrayD<u8>>(npz, key)?.mapv(f64::from)
    };
    arr.into_dimensionality::<Ix3>()
        .map_err(|_| Error::format(key, "expected a 3-D array"))
}

/// Reads a raw case: keys `t1`, `t1c`, `t2`, `flair` (any real or integer
/// dtype, `D×H×W`), optional `seg` and optional `spacing` (default 1 mm).
/// A preprocessed [`CaseArchive`] is accepted too and unpacked per channel.
pub fn load_raw_case(path: &Path) -> Result<RawCase> {
    let mut npz = open_npz(path)?;
    let names = npz.names().map_err(|e| Error::format("<archive>", e))?;
    let spacing = if names.iter().any(|n| n == "spacing") {
        read_spacing(&mut npz)?
    } else {
        [1.0; 3]
    };
    if names.iter().any(|n| n == "imgs") {
        let archive = load_case(path)?;
        let modalities = archive.modalities();
        let chans = modalities
            .iter()
            .enumerate()
            .map(|(i, &m)| (m, archive.imgs.index_axis(Axis(3), i).mapv(f64::from)))
            .collect();
        return Ok(RawCase {
            modalities: chans,
            seg: Some(archive.gts),
            spacing,
        });
    }
    let mut modalities = Vec::new();
    for m in Modality::ORDER {
        if names.iter().any(|n| n == m.key()) {
            modalities.push((m, read_real_3d(&mut npz, m.key())?));
        }
    }
    if modalities.is_empty() {
        return Err(Error::format("t1", "missing key (no modality arrays found)"));
    }
    let seg = if names.iter().any(|n| n == "seg") {
        let arr = match ArrayD::<u8>::read(&mut npz, "seg") {
            Ok(a) => a,
            Err(_) => read_real_3d(&mut npz, "seg")?.mapv(|v| v.round() as u8).into_dyn(),
        };
        Some(
            arr.into_dimensionality::<Ix3>()
                .map_err(|_| Error::format("seg", "expected a 3-D array"))?,
        )
    } else {
        None
    };
    Ok(RawCase {
        modalities,
        seg,
        spacing,
    })
}

/// Writes a raw case in the format read by [`load_raw_case`].
pub fn save_raw_case(case: &RawCase, path: &Path) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut npz = NpzWriter::new_with_options(file, npz_options());
    let io = |e: ndarray_npy::WriteNpzError| Error::Io(std::io::Error::other(e.to_string()));
    for (m, arr) in &case.modalities {
        npz.add_array(m.key(), arr).map_err(io)?;
    }
    if let Some(seg) = &case.seg {
        npz.add_array("seg", seg).map_err(io)?;
    }
    npz.add_array("spacing", &Array1::from(case.spacing.to_vec())).map_err(io)?;
    npz.finish().map_err(io)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PreprocessOptions {
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub single_modality: Option<Modality>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            lo_pct: 0.5,
            hi_pct: 99.5,
            single_modality: None,
        }
    }
}

/// Full pipeline for one case: clip, normalize, stack, crop, quantize.
/// Cases with labels are cropped to the labeled slab; unlabeled cases use the
/// signal slab and receive an all-background `gts`.
pub fn preprocess_case(raw: &RawCase, opts: &PreprocessOptions) -> Result<(CaseArchive, usize)> {
    let wanted: Vec<Modality> = match opts.single_modality {
        Some(m) => vec![m],
        None => Modality::ORDER.to_vec(),
    };
    let mut normalized = Vec::with_capacity(wanted.len());
    for m in &wanted {
        let (_, arr) = raw
            .modalities
            .iter()
            .find(|(k, _)| k == m)
            .ok_or_else(|| Error::format(m.key(), "missing key"))?;
        normalized.push(normalize_modality(arr.view(), opts.lo_pct, opts.hi_pct)?);
    }
    let volume = if wanted.len() == 4 {
        stack_modalities(&normalized, raw.spacing)?
    } else {
        let single = normalized.remove(0).insert_axis(Axis(3));
        MultiModalVolume::new(single, raw.spacing, wanted.clone())?
    };
    let (volume, mask, offset) = match &raw.seg {
        Some(seg) => {
            let mask = SegmentationMask::new(seg.clone())?;
            crop_to_labeled_roi(&volume, &mask)?
        }
        None => {
            let (v, off) = crop_to_signal_roi(&volume);
            let mask = SegmentationMask::zeros(v.spatial_shape());
            (v, mask, off)
        }
    };
    Ok((CaseArchive::from_volume(&volume, &mask)?, offset))
}

/// Convenience for tests and tools holding dynamic arrays.
pub fn as_3d(arr: ArrayD<f64>) -> Result<Array3<f64>> {
    arr.into_dimensionality::<Ix3>()
        .map_err(|_| Error::input("expected a 3-D array"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn ramp(n: usize) -> Array3<f64> {
        Array::from_shape_vec((1, 1, n), (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn constant_volume_is_unchanged_by_clipping() {
        let v = Array3::from_elem((2, 3, 4), 7.0);
        assert_eq!(clip_percentiles(v.view(), 0.5, 99.5).unwrap(), v);
    }

    #[test]
    fn full_band_clip_is_identity() {
        let v = ramp(1000);
        assert_eq!(clip_percentiles(v.view(), 0.0, 100.0).unwrap(), v);
    }

    #[test]
    fn ramp_clip_bounds() {
        // ranks 0.005*999 = 4.995 and 0.995*999 = 994.005
        let out = clip_percentiles(ramp(1000).view(), 0.5, 99.5).unwrap();
        let min = out.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((min - 4.995).abs() < 1e-12);
        assert!((max - 994.005).abs() < 1e-12);
        assert_eq!(out[[0, 0, 500]], 500.0);
    }

    #[test]
    fn clip_rejects_empty_and_bad_band() {
        let empty = Array3::<f64>::zeros((0, 2, 2));
        assert!(clip_percentiles(empty.view(), 0.5, 99.5).is_err());
        let v = ramp(10);
        assert!(clip_percentiles(v.view(), 50.0, 50.0).is_err());
        assert!(clip_percentiles(v.view(), -1.0, 50.0).is_err());
    }

    #[test]
    fn minmax_examples() {
        let v = Array::from_shape_vec((1, 1, 4), vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let out = minmax_normalize(v.view()).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[0.0, 63.75, 127.5, 255.0]);
        let two = Array::from_shape_vec((1, 1, 2), vec![-3.0, 9.0]).unwrap();
        assert_eq!(minmax_normalize(two.view()).unwrap().as_slice().unwrap(), &[0.0, 255.0]);
        let flat = Array3::from_elem((2, 2, 2), 5.0);
        assert!(minmax_normalize(flat.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    fn volume_with_labels(depth: usize, labeled: &[usize]) -> (MultiModalVolume, SegmentationMask) {
        let vol = MultiModalVolume::new(
            Array4::from_elem((depth, 4, 4, 4), 10.0),
            [1.0; 3],
            Modality::ORDER.to_vec(),
        )
        .unwrap();
        let mut labels = Array3::zeros((depth, 4, 4));
        for &z in labeled {
            labels[[z, 1, 2]] = 2;
        }
        (vol, SegmentationMask::new(labels).unwrap())
    }

    #[test]
    fn crop_covers_labeled_slab() {
        let (v, m) = volume_with_labels(155, &(10..=20).collect::<Vec<_>>());
        let (cv, cm, off) = crop_to_labeled_roi(&v, &m).unwrap();
        assert_eq!((cv.spatial_shape().0, cm.shape().0, off), (11, 11, 10));

        let (v, m) = volume_with_labels(40, &[5, 30]);
        let (cv, _, off) = crop_to_labeled_roi(&v, &m).unwrap();
        assert_eq!((cv.spatial_shape().0, off), (26, 5));

        let (v, m) = volume_with_labels(6, &[0, 1, 2, 3, 4, 5]);
        let (cv, cm, off) = crop_to_labeled_roi(&v, &m).unwrap();
        assert_eq!((cv, cm, off), (v, m, 0));
    }

    #[test]
    fn crop_of_unlabeled_case_is_identity() {
        let (v, m) = volume_with_labels(9, &[]);
        let (cv, _, off) = crop_to_labeled_roi(&v, &m).unwrap();
        assert_eq!((cv, off), (v, 0));
    }

    #[test]
    fn crop_rejects_shape_mismatch() {
        let (v, _) = volume_with_labels(9, &[]);
        let m = SegmentationMask::zeros((8, 4, 4));
        assert!(crop_to_labeled_roi(&v, &m).is_err());
    }

    #[test]
    fn signal_slab_skips_empty_slices() {
        let mut data = Array4::zeros((6, 2, 2, 4));
        data[[2, 0, 0, 3]] = 1.0;
        data[[4, 1, 1, 0]] = 1.0;
        let v = MultiModalVolume::new(data, [1.0; 3], Modality::ORDER.to_vec()).unwrap();
        let (c, off) = crop_to_signal_roi(&v);
        assert_eq!((c.spatial_shape().0, off), (3, 2));
    }

    #[test]
    fn stacking_keeps_order() {
        let vols: Vec<_> = (1..=4).map(|k| Array3::from_elem((2, 3, 3), k as f64)).collect();
        let v = stack_modalities(&vols, [1.0; 3]).unwrap();
        for lane in v.intensities().lanes(Axis(3)) {
            assert_eq!(lane.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        }
        assert!(stack_modalities(&vols[..3], [1.0; 3]).is_err());
        let mut bad = vols.clone();
        bad[2] = Array3::zeros((2, 3, 4));
        assert!(stack_modalities(&bad, [1.0; 3]).is_err());
    }

    #[test]
    fn identical_inputs_stack_to_identical_channels() {
        let base = Array3::from_shape_fn((2, 2, 2), |(a, b, c)| (a * 4 + b * 2 + c) as f64);
        let v = stack_modalities(&vec![base.clone(); 4], [1.0; 3]).unwrap();
        for m in 0..4 {
            assert_eq!(v.intensities().index_axis(Axis(3), m), base);
        }
    }

    #[test]
    fn volume_invariants_enforced() {
        let data = Array4::zeros((2, 2, 2, 3));
        assert!(MultiModalVolume::new(data, [1.0; 3], vec![Modality::T1; 3]).is_err());
        let data = Array4::zeros((2, 2, 2, 1));
        assert!(MultiModalVolume::new(data, [1.0, 0.0, 1.0], vec![Modality::T1]).is_err());
        let mut labels = Array3::zeros((1, 1, 2));
        labels[[0, 0, 1]] = 3;
        assert!(SegmentationMask::new(labels).is_err());
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5), 1);
        assert_eq!(quantize(1.49), 1);
        assert_eq!(quantize(254.5), 255);
        assert_eq!(quantize(255.0), 255);
        assert_eq!(quantize(0.0), 0);
    }
}
