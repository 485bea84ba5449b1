//! Synthetic crowd scenes with exactly known head positions.
//!
//! Scenes are soft-edged dark ellipses ("heads") over a configurable
//! background texture. The renderer returns the exact sampled centers as
//! annotations, so count metrics have a known ground truth and annotation
//! noise can be injected with full bookkeeping.
//!
//! Dataset layout written by [`build_dataset`]:
//!
//! ```text
//! out/
//!   dataset_meta.json          scene spec, split sizes, noise spec
//!   images/0000.png ...        8-bit RGB scenes (train split first, then val)
//!   train_annotations.jsonl    corrupted annotations, one record per image
//!   val_annotations.jsonl      clean annotations, one record per image
//!   noise_manifest.jsonl       removed indices and applied shifts per train image
//! ```

use crate::density::{
    annotations_to_string, load_annotations, AnnotationRecord, DensityError, PointAnnotations,
};
use crate::noise::{corrupt, ManifestRecord, NoiseError, NoiseSpec};
use crate::rng::{derive_seed_indexed, rng_from_seed};
use image::RgbImage;
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    BadSpec(String),
    #[error("could not place {requested} heads (placed {placed}) in a {size}x{size} image")]
    InfeasiblePlacement { requested: usize, placed: usize, size: u32 },
    #[error("output directory {0} exists and is not empty; pass overwrite to replace it")]
    DirectoryNotEmpty(PathBuf),
    #[error("dataset split sizes must be positive, got train={train} val={val}")]
    BadSplit { train: usize, val: usize },
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error at {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

/// Background fill behind the rendered heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundTexture {
    Flat,
    Gradient,
    Noise,
}

/// Parameters of one synthetic scene family.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Square image side in pixels; at least 64.
    pub image_size: u32,
    /// Inclusive range of head counts per scene.
    pub count_range: (u32, u32),
    /// Inclusive range of head radii in pixels.
    pub head_radius_range: (f64, f64),
    pub background_texture: BackgroundTexture,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.image_size < 64 {
            return Err(SynthError::BadSpec(format!(
                "image_size must be >= 64, got {}",
                self.image_size
            )));
        }
        if self.count_range.0 > self.count_range.1 {
            return Err(SynthError::BadSpec(format!(
                "count_range min {} > max {}",
                self.count_range.0, self.count_range.1
            )));
        }
        let (rmin, rmax) = self.head_radius_range;
        if !(rmin > 0.0 && rmax >= rmin && rmax.is_finite()) {
            return Err(SynthError::BadSpec(format!(
                "head_radius_range must satisfy 0 < min <= max, got ({rmin}, {rmax})"
            )));
        }
        if rmax >= f64::from(self.image_size) / 4.0 {
            return Err(SynthError::BadSpec(format!(
                "head radius {rmax} too large for image size {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders one scene. Deterministic per spec (including the seed): the same
/// spec yields bit-identical pixels and annotations.
pub fn render_scene(spec: &SceneSpec) -> Result<(RgbImage, PointAnnotations), SynthError> {
    spec.validate()?;
    let size = spec.image_size as usize;
    let mut rng = rng_from_seed(spec.seed);

    let n = rng.random_range(spec.count_range.0..=spec.count_range.1) as usize;

    // Keep blob interiors inside the frame so the exact-count contracts of the
    // density pipeline hold for every rendered head.
    let margin = (spec.head_radius_range.1.ceil() + 2.0).max(8.0);
    if 2.0 * margin >= f64::from(spec.image_size) {
        return Err(SynthError::BadSpec(format!(
            "image_size {} too small for head radius range {:?}",
            spec.image_size, spec.head_radius_range
        )));
    }

    // Rejection-sample centers with a minimum 2 px separation.
    let min_sep_sq = 4.0;
    let lo = margin;
    let hi = f64::from(spec.image_size) - 1.0 - margin;
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let budget = 200 * n + 1000;
    while centers.len() < n {
        if attempts >= budget {
            return Err(SynthError::InfeasiblePlacement {
                requested: n,
                placed: centers.len(),
                size: spec.image_size,
            });
        }
        attempts += 1;
        let x = rng.random_range(lo..=hi);
        let y = rng.random_range(lo..=hi);
        if centers.iter().all(|&(cx, cy)| (cx - x).powi(2) + (cy - y).powi(2) >= min_sep_sq) {
            centers.push((x, y));
        }
    }

    // Background luminance in [0, 1].
    let base: f64 = rng.random_range(0.60..=0.88);
    let mut lum = vec![0.0f64; size * size];
    match spec.background_texture {
        BackgroundTexture::Flat => lum.fill(base),
        BackgroundTexture::Gradient => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.random_range(0.08..=0.22);
            let (ct, st) = (theta.cos(), theta.sin());
            let diag = f64::from(spec.image_size) * std::f64::consts::SQRT_2;
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f64 * ct + y as f64 * st) / diag;
                    lum[y * size + x] = (base + amp * (t - 0.25)).clamp(0.0, 1.0);
                }
            }
        }
        BackgroundTexture::Noise => {
            let amp: f64 = rng.random_range(0.03..=0.08);
            for v in lum.iter_mut() {
                *v = (base + rng.random_range(-amp..=amp)).clamp(0.0, 1.0);
            }
        }
    }

    // Heads: dark soft-edged ellipses, drawn in placement order.
    for &(cx, cy) in &centers {
        let r: f64 = rng.random_range(spec.head_radius_range.0..=spec.head_radius_range.1);
        let aspect: f64 = rng.random_range(0.75..=1.3);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let intensity: f64 = rng.random_range(0.02..=0.30);
        let (rx, ry) = (r * aspect, r / aspect);
        let reach = rx.max(ry) + 1.0;
        let (ct, st) = (theta.cos(), theta.sin());
        let x0 = ((cx - reach).floor().max(0.0)) as usize;
        let x1 = ((cx + reach).ceil().min(size as f64 - 1.0)) as usize;
        let y0 = ((cy - reach).floor().max(0.0)) as usize;
        let y1 = ((cy + reach).ceil().min(size as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = (ct * dx + st * dy) / rx;
                let v = (-st * dx + ct * dy) / ry;
                let rho = (u * u + v * v).sqrt();
                let cov = smoothstep((1.0 - rho) / 0.25);
                if cov > 0.0 {
                    let p = &mut lum[y * size + x];
                    *p = *p * (1.0 - cov) + intensity * cov;
                }
            }
        }
    }

    // Slight per-scene channel tint so the three channels carry signal.
    let tint: [f64; 3] =
        [rng.random_range(0.95..=1.05), rng.random_range(0.95..=1.05), rng.random_range(0.95..=1.05)];
    let mut img = RgbImage::new(spec.image_size, spec.image_size);
    for y in 0..size {
        for x in 0..size {
            let l = lum[y * size + x];
            let px = image::Rgb(core::array::from_fn(|c| {
                ((l * tint[c]).clamp(0.0, 1.0) * 255.0).round() as u8
            }));
            img.put_pixel(x as u32, y as u32, px);
        }
    }

    let ann = PointAnnotations::new(centers, spec.image_size, spec.image_size)
        .expect("centers sampled in bounds");
    Ok((img, ann))
}

/// Top-level description persisted with every generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub noise: NoiseSpec,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const TRAIN_ANNOTATIONS: &str = "train_annotations.jsonl";
pub const VAL_ANNOTATIONS: &str = "val_annotations.jsonl";
pub const NOISE_MANIFEST: &str = "noise_manifest.jsonl";
pub const DATASET_META: &str = "dataset_meta.json";

/// Renders `n_train + n_val` scenes and writes the dataset directory.
///
/// Training annotations are corrupted with `noise`; validation annotations
/// are always clean. Regeneration from the same inputs is byte-identical.
pub fn build_dataset(
    spec: &SceneSpec,
    n_train: usize,
    n_val: usize,
    noise: &NoiseSpec,
    out_dir: &Path,
    overwrite: bool,
) -> Result<DatasetMeta, SynthError> {
    spec.validate()?;
    noise.validate()?;
    if n_train == 0 || n_val == 0 {
        return Err(SynthError::BadSplit { train: n_train, val: n_val });
    }

    if out_dir.exists() {
        let non_empty = std::fs::read_dir(out_dir).map_err(io_err(out_dir))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(SynthError::DirectoryNotEmpty(out_dir.to_path_buf()));
            }
            std::fs::remove_dir_all(out_dir).map_err(io_err(out_dir))?;
        }
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;

    let mut train_records = Vec::with_capacity(n_train);
    let mut manifest = String::new();
    let mut val_records = Vec::with_capacity(n_val);

    for i in 0..n_train + n_val {
        let scene_spec =
            SceneSpec { seed: derive_seed_indexed(spec.seed, "scene", i as u64), ..spec.clone() };
        let (img, ann) = render_scene(&scene_spec)?;
        let rel = format!("images/{i:04}.png");
        let img_path = out_dir.join(&rel);
        img.save(&img_path).map_err(|source| SynthError::Image { path: img_path, source })?;

        if i < n_train {
            let per_image_noise = NoiseSpec {
                seed: derive_seed_indexed(noise.seed, "image", i as u64),
                ..*noise
            };
            let corrupted = corrupt(&ann, &per_image_noise)?;
            train_records.push(AnnotationRecord {
                image: rel.clone(),
                points: corrupted.annotations.points().iter().map(|&(x, y)| [x, y]).collect(),
            });
            let record = ManifestRecord {
                image: rel,
                removed_indices: corrupted.removed_indices,
                applied_shifts: corrupted.applied_shifts.iter().map(|&(x, y)| [x, y]).collect(),
            };
            let _ = writeln!(manifest, "{}", serde_json::to_string(&record).expect("manifest"));
        } else {
            val_records.push(AnnotationRecord {
                image: rel,
                points: ann.points().iter().map(|&(x, y)| [x, y]).collect(),
            });
        }
    }

    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        spec: spec.clone(),
        n_train,
        n_val,
        noise: *noise,
    };
    let write = |name: &str, contents: &str| -> Result<(), SynthError> {
        let path = out_dir.join(name);
        std::fs::write(&path, contents).map_err(io_err(&path))
    };
    write(TRAIN_ANNOTATIONS, &annotations_to_string(&train_records))?;
    write(VAL_ANNOTATIONS, &annotations_to_string(&val_records))?;
    write(NOISE_MANIFEST, &manifest)?;
    write(
        DATASET_META,
        &format!("{}\n", serde_json::to_string_pretty(&meta).expect("meta serializes")),
    )?;
    Ok(meta)
}

/// One image with its annotations, decoded and normalized for the model.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Array3<f32>,
    pub annotations: PointAnnotations,
    pub path: String,
}

/// A dataset split loaded fully into memory.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub items: Vec<DatasetItem>,
}

/// Decodes an image file to the `[3, H, W]` float layout in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f32>, SynthError> {
    let img = image::open(path)
        .map_err(|source| SynthError::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = f32::from(px.0[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Loads a split given its annotation file inside a dataset directory.
pub fn load_split(dataset_dir: &Path, annotations_file: &str) -> Result<LoadedSplit, SynthError> {
    let records = load_annotations(&dataset_dir.join(annotations_file))?;
    let mut items = Vec::with_capacity(records.len());
    for r in records {
        let img_path = dataset_dir.join(&r.image);
        let image = load_image(&img_path)?;
        let (h, w) = (image.dim().1 as u32, image.dim().2 as u32);
        let annotations =
            PointAnnotations::new(r.points.iter().map(|p| (p[0], p[1])).collect(), w, h)?;
        items.push(DatasetItem { image, annotations, path: r.image });
    }
    Ok(LoadedSplit { items })
}

/// Reads the dataset metadata file, when present.
pub fn load_meta(dataset_dir: &Path) -> Result<DatasetMeta, SynthError> {
    let path = dataset_dir.join(DATASET_META);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text)
        .map_err(|e| SynthError::BadSpec(format!("{}: {e}", path.display())))
}
