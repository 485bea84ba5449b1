//! Point annotations and ground-truth density maps.
//!
//! A density map is built by depositing one truncated Gaussian window per
//! annotated head center at full input resolution and then block-summing down
//! to the model's output stride. Each truncated window is renormalized to unit
//! mass (also at image borders), so the map total equals the point count and
//! count metrics stay exact.

use crate::elem::Elem;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("point ({x}, {y}) outside image bounds {width}x{height}")]
    PointOutOfBounds { x: f64, y: f64, width: u32, height: u32 },
    #[error("kernel size must be odd and positive, got {0}")]
    BadKernelSize(u32),
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("stride {stride} does not divide map dimensions {height}x{width}")]
    NonDivisibleStride { stride: u32, height: usize, width: usize },
    #[error("annotation file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("annotation file {path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
}

/// Head-center point annotations for one image, in input-pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PointAnnotations {
    points: Vec<(f64, f64)>,
    width: u32,
    height: u32,
}

impl PointAnnotations {
    /// Builds annotations, rejecting any point outside `[0, width) x [0, height)`.
    pub fn new(points: Vec<(f64, f64)>, width: u32, height: u32) -> Result<Self, DensityError> {
        for &(x, y) in &points {
            if !(x.is_finite() && y.is_finite())
                || x < 0.0
                || y < 0.0
                || x >= f64::from(width)
                || y >= f64::from(height)
            {
                return Err(DensityError::PointOutOfBounds { x, y, width, height });
            }
        }
        Ok(Self { points, width, height })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self { points: Vec::new(), width, height }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }
}

/// Non-negative 2-D grid whose total approximates the person count.
///
/// `stride` is the number of input pixels covered by one cell along each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap<F: Elem = f64> {
    grid: Array2<F>,
    stride: u32,
}

impl<F: Elem> DensityMap<F> {
    pub fn new(grid: Array2<F>, stride: u32) -> Self {
        Self { grid, stride }
    }

    pub fn zeros(height: usize, width: usize, stride: u32) -> Self {
        Self { grid: Array2::zeros((height, width)), stride }
    }

    pub fn grid(&self) -> &Array2<F> {
        &self.grid
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.grid.dim();
        (d.0, d.1)
    }

    /// Converts the map to another element width (e.g. `f64` ground truth to
    /// the `f32` used in training).
    pub fn cast<G: Elem>(&self) -> DensityMap<G> {
        DensityMap { grid: self.grid.mapv(|v| G::of(v.f64())), stride: self.stride }
    }
}

/// Sum of all cells; the predicted or annotated person count.
pub fn total_count<F: Elem>(map: &DensityMap<F>) -> f64 {
    map.grid.iter().map(|v| v.f64()).sum()
}

/// Reduces a map by summing `factor x factor` blocks, preserving total mass.
pub fn count_preserving_downsample<F: Elem>(
    map: &DensityMap<F>,
    factor: u32,
) -> Result<DensityMap<F>, DensityError> {
    let (h, w) = map.shape();
    if factor == 0 {
        return Err(DensityError::NonDivisibleStride { stride: 0, height: h, width: w });
    }
    let f = factor as usize;
    if h % f != 0 || w % f != 0 {
        return Err(DensityError::NonDivisibleStride { stride: factor, height: h, width: w });
    }
    if f == 1 {
        return Ok(map.clone());
    }
    let mut out = Array2::<F>::zeros((h / f, w / f));
    for oy in 0..h / f {
        for ox in 0..w / f {
            let mut acc = F::zero();
            for iy in oy * f..(oy + 1) * f {
                for ix in ox * f..(ox + 1) * f {
                    acc += map.grid[[iy, ix]];
                }
            }
            out[[oy, ox]] = acc;
        }
    }
    Ok(DensityMap { grid: out, stride: map.stride * factor })
}

/// Builds the ground-truth density map for one image.
///
/// Each point snaps to its nearest pixel and deposits a `kernel_size`-wide
/// truncated Gaussian window with standard deviation `sigma`, renormalized to
/// sum to one over its in-bounds cells. The full-resolution map is then
/// block-summed down to `stride`-cell resolution.
pub fn generate_density_map(
    ann: &PointAnnotations,
    kernel_size: u32,
    sigma: f64,
    stride: u32,
) -> Result<DensityMap<f64>, DensityError> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(DensityError::BadKernelSize(kernel_size));
    }
    if !(sigma > 0.0) {
        return Err(DensityError::BadSigma(sigma));
    }
    let (w, h) = (ann.width as usize, ann.height as usize);
    if stride == 0 || h % stride as usize != 0 || w % stride as usize != 0 {
        return Err(DensityError::NonDivisibleStride { stride, height: h, width: w });
    }

    let half = (kernel_size / 2) as i64;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut full = Array2::<f64>::zeros((h, w));

    for &(x, y) in ann.points() {
        // Nearest-pixel snap; coordinates are already validated in-bounds.
        let cx = (x.round() as i64).clamp(0, w as i64 - 1);
        let cy = (y.round() as i64).clamp(0, h as i64 - 1);
        let y0 = (cy - half).max(0);
        let y1 = (cy + half).min(h as i64 - 1);
        let x0 = (cx - half).max(0);
        let x1 = (cx + half).min(w as i64 - 1);

        let mut mass = 0.0;
        for iy in y0..=y1 {
            let dy = (iy - cy) as f64;
            for ix in x0..=x1 {
                let dx = (ix - cx) as f64;
                mass += (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
            }
        }
        // mass > 0 always: the window contains at least the center cell.
        let norm = 1.0 / mass;
        for iy in y0..=y1 {
            let dy = (iy - cy) as f64;
            for ix in x0..=x1 {
                let dx = (ix - cx) as f64;
                full[[iy as usize, ix as usize]] +=
                    (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp() * norm;
            }
        }
    }

    count_preserving_downsample(&DensityMap::new(full, 1), stride)
}

/// One line of an annotation file: an image path and its head points.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationRecord {
    pub image: String,
    pub points: Vec<[f64; 2]>,
}

/// Loads a JSON-lines annotation file, reporting malformed records by line.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, DensityError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)
        .map_err(|source| DensityError::Io { path: display.clone(), source })?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DensityError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line).map_err(|e| {
            DensityError::Malformed { path: display.clone(), line: idx + 1, message: e.to_string() }
        })?;
        for p in &record.points {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(DensityError::Malformed {
                    path: display.clone(),
                    line: idx + 1,
                    message: format!("non-finite point [{}, {}]", p[0], p[1]),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Serializes records to the JSON-lines annotation format.
pub fn annotations_to_string(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", serde_json::to_string(r).expect("serializable record"));
    }
    out
}
