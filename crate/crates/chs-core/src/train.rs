//! Training: geometric augmentation, the epoch loop with progressive
//! cross-head supervision, per-epoch validation, metrics logging and
//! checkpointing.
//!
//! Every random stream (shuffling, per-image augmentation) is derived from
//! `(seed, epoch, image index)` rather than from one advancing generator, so
//! a resumed run replays exactly the same batches and augmentations as an
//! uninterrupted one.

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::density::{generate_density_map, DensityError, PointAnnotations};
use crate::eval::{evaluate_items, EvalBundle, EvalError};
use crate::model::{ChsNet, ModelConfig, ModelError};
use crate::optim::{learning_rate, AdamW, LrSchedule};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::supervision::{
    chs_loss, dual_mse_loss, schedule, Reduction, ScheduleState, SupervisionError,
};
use crate::synth::{load_split, DatasetItem, SynthError, TRAIN_ANNOTATIONS, VAL_ANNOTATIONS};
use ndarray::{s, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] SynthError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Supervision(#[from] SupervisionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (delta={delta}, alpha={alpha}); \
         aborting"
    )]
    NonFiniteLoss { epoch: u32, batch: usize, delta: f64, alpha: f64 },
}

/// Which loss drives the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-head supervision with the progressive schedules.
    #[default]
    Chs,
    /// Reference path: both heads regress directly onto the ground truth.
    DualMse,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: u32,
    pub lr_schedule: LrSchedule,
    pub crop_size: usize,
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub delta_max: f64,
    pub alpha_max: f64,
    pub reduction: Reduction,
    pub loss: LossKind,
    /// Gaussian window width for ground-truth density maps.
    pub gt_kernel_size: u32,
    /// Gaussian standard deviation for ground-truth density maps.
    pub gt_sigma: f64,
    /// Halt after this epoch while keeping the schedule horizon at
    /// `max_epochs`; the run can be resumed from its last checkpoint.
    pub stop_after: Option<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4.0e-5,
            weight_decay: 1.0e-5,
            max_epochs: 1000,
            lr_schedule: LrSchedule::Cosine,
            crop_size: 512,
            scale_range: (0.75, 1.25),
            hflip_prob: 0.5,
            batch_size: 8,
            seed: 0,
            delta_max: 0.1,
            alpha_max: 1.0,
            reduction: Reduction::Mean,
            loss: LossKind::Chs,
            gt_kernel_size: 15,
            gt_sigma: 4.0,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile matching the synthetic experiments.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1.0e-3,
            max_epochs: 50,
            crop_size: 128,
            scale_range: (1.0, 1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(TrainError::BadConfig(format!(
                "hflip_prob must lie in [0, 1], got {}",
                self.hflip_prob
            )));
        }
        if !(0.0..=1.0).contains(&self.delta_max) || !(0.0..=1.0).contains(&self.alpha_max) {
            return Err(TrainError::BadConfig(
                "delta_max and alpha_max must lie in [0, 1]".into(),
            ));
        }
        if self.scale_range.0 > self.scale_range.1 || !(self.scale_range.0 > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "scale_range must satisfy 0 < min <= max, got {:?}",
                self.scale_range
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::BadConfig("batch_size and max_epochs must be >= 1".into()));
        }
        if self.crop_size % model.encoder_stride as usize != 0 {
            return Err(TrainError::BadConfig(format!(
                "crop_size {} not divisible by encoder stride {}",
                self.crop_size, model.encoder_stride
            )));
        }
        Ok(())
    }
}

/// Bilinear resize of a `[3, H, W]` image to `(out_h, out_w)`.
pub fn resize_bilinear(image: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..c {
                let top = image[[ch, y0, x0]] * (1.0 - wx) + image[[ch, y0, x1]] * wx;
                let bot = image[[ch, y1, x0]] * (1.0 - wx) + image[[ch, y1, x1]] * wx;
                out[[ch, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Random scale, pad-and-crop to `crop_size`, horizontal flip. Annotation
/// points follow the same geometry; points outside the crop are dropped.
///
/// Images smaller than the crop after scaling are zero-padded at the bottom
/// and right before cropping.
pub fn augment(
    image: &Array3<f32>,
    ann: &PointAnnotations,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, PointAnnotations) {
    let (_, h, w) = image.dim();
    let crop = cfg.crop_size;

    // Fixed draw order keeps the stream stable across input sizes.
    let scale: f64 = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let scaled = resize_bilinear(image, sh, sw);
    // Exact per-axis factors (rounding makes them differ slightly from
    // `scale`); pixel-center convention matches the resize.
    let fy = sh as f64 / h as f64;
    let fx = sw as f64 / w as f64;
    let points: Vec<(f64, f64)> = ann
        .points()
        .iter()
        .map(|&(x, y)| {
            (
                ((x + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f64),
                ((y + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f64),
            )
        })
        .collect();

    // Pad to at least the crop size.
    let ph = sh.max(crop);
    let pw = sw.max(crop);
    let padded = if (ph, pw) != (sh, sw) {
        let mut p = Array3::<f32>::zeros((3, ph, pw));
        p.slice_mut(s![.., ..sh, ..sw]).assign(&scaled);
        p
    } else {
        scaled
    };

    let off_y = rng.random_range(0..=(ph - crop)) as f64;
    let off_x = rng.random_range(0..=(pw - crop)) as f64;
    let mut out = padded
        .slice(s![.., off_y as usize..off_y as usize + crop, off_x as usize..off_x as usize + crop])
        .to_owned();
    let mut kept: Vec<(f64, f64)> = points
        .into_iter()
        .map(|(x, y)| (x - off_x, y - off_y))
        .filter(|&(x, y)| x >= 0.0 && y >= 0.0 && x < crop as f64 && y < crop as f64)
        .collect();

    if rng.random::<f64>() < cfg.hflip_prob {
        out.invert_axis(Axis(2));
        for p in kept.iter_mut() {
            p.0 = ((crop - 1) as f64 - p.0).max(0.0);
        }
    }

    let ann = PointAnnotations::new(kept, crop as u32, crop as u32)
        .expect("augmented points stay inside the crop");
    (out, ann)
}

/// Per-epoch metrics record appended to `metrics.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub epoch: u32,
    pub delta: f64,
    pub alpha: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub conv_loss: f64,
    pub tran_loss: f64,
    pub mask_overlap: f64,
    pub val_mae: f64,
    pub val_mse: f64,
}

pub struct TrainOutcome {
    pub epochs_run: u32,
    pub best_epoch: u32,
    pub best_val_mae: f64,
    pub final_val: EvalBundle,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub metrics_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

fn augment_seed(seed: u64, epoch: u32, index: usize) -> u64 {
    derive_seed_indexed(derive_seed_indexed(seed, "augment", u64::from(epoch)), "image", index as u64)
}

/// Builds the ground-truth density map for one (augmented) annotation set at
/// the model's output stride.
fn gt_map(
    ann: &PointAnnotations,
    cfg: &TrainConfig,
    out_stride: u32,
) -> Result<ndarray::Array2<f32>, DensityError> {
    let map = generate_density_map(ann, cfg.gt_kernel_size, cfg.gt_sigma, out_stride)?;
    Ok(map.cast::<f32>().grid().clone())
}

/// Trains a model on a dataset directory, logging one metrics record per
/// epoch and checkpointing both the best-validation-MAE and the last epoch.
pub fn train(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    model_config.validate()?;
    cfg.validate(model_config)?;

    let train_split = load_split(dataset_dir, TRAIN_ANNOTATIONS)?;
    let val_split = load_split(dataset_dir, VAL_ANNOTATIONS)?;
    if train_split.items.is_empty() || val_split.items.is_empty() {
        return Err(TrainError::BadConfig(format!(
            "dataset {} has an empty split",
            dataset_dir.display()
        )));
    }

    std::fs::create_dir_all(out_dir)
        .map_err(|source| TrainError::Io { path: out_dir.to_path_buf(), source })?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    let mut model = ChsNet::<f32>::new(model_config.clone(), derive_seed(cfg.seed, "model"))?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut start_epoch = 1u32;
    let mut best_val_mae = f64::INFINITY;
    let mut best_epoch = 0u32;

    if let Some(resume_path) = resume {
        let ckpt = checkpoint::load(resume_path)?;
        let sched = ckpt.schedule;
        if sched.delta_max != cfg.delta_max
            || sched.alpha_max != cfg.alpha_max
            || sched.t_max != cfg.max_epochs
        {
            return Err(TrainError::BadConfig(format!(
                "resume checkpoint schedule {sched:?} does not match the train config"
            )));
        }
        ckpt.restore(&mut model, Some(&mut opt))?;
        start_epoch = ckpt.epoch + 1;
        if let Some(mae) = ckpt.best_val_mae {
            best_val_mae = mae;
            best_epoch = ckpt.epoch; // conservative: unknown exact epoch
        }
    }

    let metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|source| TrainError::Io { path: metrics_path.clone(), source })?;
    let mut metrics_out = std::io::BufWriter::new(metrics_file);

    let out_stride = model_config.output_stride();
    let map_hw = cfg.crop_size / out_stride as usize;
    let mut step_losses = Vec::new();
    let mut final_val: Option<EvalBundle> = None;

    let end_epoch = cfg.stop_after.unwrap_or(cfg.max_epochs).min(cfg.max_epochs);
    for epoch in start_epoch..=end_epoch {
        let (delta_i, alpha_i) = schedule(i64::from(epoch), cfg.max_epochs, cfg.delta_max, cfg.alpha_max)?;
        let lr = learning_rate(cfg.lr_schedule, cfg.learning_rate, epoch, cfg.max_epochs);

        let mut order: Vec<usize> = (0..train_split.items.len()).collect();
        let mut shuffle_rng = rng_from_seed(derive_seed_indexed(cfg.seed, "shuffle", u64::from(epoch)));
        // Fisher-Yates.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut epoch_conv = 0.0;
        let mut epoch_tran = 0.0;
        let mut epoch_overlap = 0.0;
        let mut n_batches = 0usize;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let prepared: Vec<Result<(Array3<f32>, ndarray::Array2<f32>), TrainError>> = chunk
                .par_iter()
                .map(|&idx| {
                    let item: &DatasetItem = &train_split.items[idx];
                    let mut rng = rng_from_seed(augment_seed(cfg.seed, epoch, idx));
                    let (img, ann) = augment(&item.image, &item.annotations, cfg, &mut rng);
                    let gt = gt_map(&ann, cfg, out_stride)?;
                    Ok((img, gt))
                })
                .collect();

            let bsz = chunk.len();
            let mut x = Array4::<f32>::zeros((bsz, 3, cfg.crop_size, cfg.crop_size));
            let mut gt = Array3::<f32>::zeros((bsz, map_hw, map_hw));
            for (b, item) in prepared.into_iter().enumerate() {
                let (img, g) = item?;
                x.index_axis_mut(Axis(0), b).assign(&img);
                gt.index_axis_mut(Axis(0), b).assign(&g);
            }

            let (conv, tran) = model.forward_batch(&x, true)?;
            let out = match cfg.loss {
                LossKind::Chs => chs_loss(&conv, &tran, &gt, delta_i, alpha_i, cfg.reduction)?,
                LossKind::DualMse => dual_mse_loss(&conv, &tran, &gt, cfg.reduction)?,
            };
            if !out.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    delta: delta_i,
                    alpha: alpha_i,
                });
            }
            model.zero_grad();
            model.backward(&out.d_conv, &out.d_tran);
            let mut params = model.params();
            opt.step(&mut params, lr);

            step_losses.push(out.loss);
            epoch_loss += out.loss;
            epoch_conv += out.conv_loss;
            epoch_tran += out.tran_loss;
            epoch_overlap += out.mask_overlap;
            n_batches += 1;
        }

        let val = evaluate_items(&mut model, &val_split.items, cfg.batch_size)?;
        let record = MetricsRecord {
            epoch,
            delta: delta_i,
            alpha: alpha_i,
            lr,
            train_loss: epoch_loss / n_batches as f64,
            conv_loss: epoch_conv / n_batches as f64,
            tran_loss: epoch_tran / n_batches as f64,
            mask_overlap: epoch_overlap / n_batches as f64,
            val_mae: val.average.mae,
            val_mse: val.average.mse,
        };
        writeln!(metrics_out, "{}", serde_json::to_string(&record).expect("record serializes"))
            .map_err(|source| TrainError::Io { path: metrics_path.clone(), source })?;
        metrics_out
            .flush()
            .map_err(|source| TrainError::Io { path: metrics_path.clone(), source })?;

        let sched_state = ScheduleState {
            delta_max: cfg.delta_max,
            alpha_max: cfg.alpha_max,
            t_max: cfg.max_epochs,
            epoch,
        };
        if val.average.mae < best_val_mae {
            best_val_mae = val.average.mae;
            best_epoch = epoch;
            let ckpt =
                Checkpoint::capture(&mut model, epoch, sched_state, Some(best_val_mae), None);
            checkpoint::save(&best_path, &ckpt)?;
        }
        let last =
            Checkpoint::capture(&mut model, epoch, sched_state, Some(best_val_mae), Some(&opt));
        checkpoint::save(&last_path, &last)?;
        final_val = Some(val);
    }

    let final_val = match final_val {
        Some(v) => v,
        // Resume at an epoch past the end: report current model state.
        None => evaluate_items(&mut model, &val_split.items, cfg.batch_size)?,
    };

    Ok(TrainOutcome {
        epochs_run: end_epoch.saturating_sub(start_epoch - 1),
        best_epoch,
        best_val_mae,
        final_val,
        step_losses,
        metrics_path,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}
