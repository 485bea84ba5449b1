//! Controlled annotation corruption: missing points and location shifts.
//!
//! Both corruption modes are exact and reproducible: `inject_missing` removes
//! exactly `floor(rate * N)` points chosen without replacement from a seeded
//! ChaCha8 stream, and `inject_shift` displaces every point by an independent
//! Gaussian offset from the same generator family (see [`crate::rng`]).

use crate::density::PointAnnotations;
use crate::rng::{derive_seed, rng_from_seed};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("missing rate must lie in [0, 1], got {0}")]
    BadRate(f64),
    #[error("shift sigma must be non-negative, got {0}")]
    BadSigma(f64),
}

/// Parameters of the two corruption modes applied to training annotations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Fraction of points removed per image; exactly `floor(rate * N)` points.
    pub missing_rate: f64,
    /// Standard deviation, in pixels, of the per-point Gaussian displacement.
    pub shift_sigma: f64,
    /// Base seed; per-image streams are derived from it.
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { missing_rate: 0.0, shift_sigma: 0.0, seed: 13 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(0.0..=1.0).contains(&self.missing_rate) || !self.missing_rate.is_finite() {
            return Err(NoiseError::BadRate(self.missing_rate));
        }
        if !(self.shift_sigma >= 0.0) || !self.shift_sigma.is_finite() {
            return Err(NoiseError::BadSigma(self.shift_sigma));
        }
        Ok(())
    }

    /// No-op corruption.
    pub fn clean(seed: u64) -> Self {
        Self { missing_rate: 0.0, shift_sigma: 0.0, seed }
    }
}

/// Removes exactly `floor(rate * N)` points, chosen uniformly without
/// replacement. Returns the corrupted annotations and the removed indices
/// (ascending, in the original indexing).
pub fn inject_missing(
    ann: &PointAnnotations,
    rate: f64,
    seed: u64,
) -> Result<(PointAnnotations, Vec<usize>), NoiseError> {
    if !(0.0..=1.0).contains(&rate) || !rate.is_finite() {
        return Err(NoiseError::BadRate(rate));
    }
    let n = ann.count();
    let k = (rate * n as f64).floor() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    // Partial Fisher-Yates: the first k entries are the removed indices.
    for i in 0..k {
        let j = rng.random_range(i..n);
        indices.swap(i, j);
    }
    let mut removed: Vec<usize> = indices[..k].to_vec();
    removed.sort_unstable();

    let keep: Vec<(f64, f64)> = ann
        .points()
        .iter()
        .enumerate()
        .filter(|(i, _)| removed.binary_search(i).is_err())
        .map(|(_, &p)| p)
        .collect();
    let corrupted = PointAnnotations::new(keep, ann.width(), ann.height())
        .expect("surviving points stay in bounds");
    Ok((corrupted, removed))
}

/// Displaces every point by an independent 2-D Gaussian offset with standard
/// deviation `sigma`, clamping to image bounds. Returns the shifted
/// annotations and the applied pre-clamp offsets `(dx, dy)` per point.
pub fn inject_shift(
    ann: &PointAnnotations,
    sigma: f64,
    seed: u64,
) -> Result<(PointAnnotations, Vec<(f64, f64)>), NoiseError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(NoiseError::BadSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok((ann.clone(), vec![(0.0, 0.0); ann.count()]));
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = rng_from_seed(seed);
    let max_x = f64::from(ann.width()) - 1.0;
    let max_y = f64::from(ann.height()) - 1.0;
    let mut shifts = Vec::with_capacity(ann.count());
    let mut moved = Vec::with_capacity(ann.count());
    for &(x, y) in ann.points() {
        let dx: f64 = normal.sample(&mut rng);
        let dy: f64 = normal.sample(&mut rng);
        shifts.push((dx, dy));
        moved.push(((x + dx).clamp(0.0, max_x), (y + dy).clamp(0.0, max_y)));
    }
    let shifted = PointAnnotations::new(moved, ann.width(), ann.height())
        .expect("clamped points stay in bounds");
    Ok((shifted, shifts))
}

/// Result of applying a full [`NoiseSpec`] to one image's annotations.
#[derive(Debug, Clone)]
pub struct Corruption {
    pub annotations: PointAnnotations,
    pub removed_indices: Vec<usize>,
    pub applied_shifts: Vec<(f64, f64)>,
}

/// Applies missing-annotation removal first, then location shifts to the
/// survivors. Sub-seeds for the two modes are derived from `spec.seed`.
pub fn corrupt(ann: &PointAnnotations, spec: &NoiseSpec) -> Result<Corruption, NoiseError> {
    spec.validate()?;
    let (kept, removed_indices) =
        inject_missing(ann, spec.missing_rate, derive_seed(spec.seed, "missing"))?;
    let (annotations, applied_shifts) =
        inject_shift(&kept, spec.shift_sigma, derive_seed(spec.seed, "shift"))?;
    Ok(Corruption { annotations, removed_indices, applied_shifts })
}

/// One line of the corruption manifest emitted next to corrupted annotations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub image: String,
    pub removed_indices: Vec<usize>,
    pub applied_shifts: Vec<[f64; 2]>,
}
