//! Cross-head supervision: deviation maps, top-fraction selection masks,
//! blended refined targets, the dual-head loss, and the linear schedules.
//!
//! Each head selects the cells where its own prediction deviates most from
//! the ground truth (exactly `floor(delta * H * W)` cells, value-descending
//! with ascending row-major index as the tie break) and, inside that mask,
//! regresses toward `alpha * other_head + (1 - alpha) * ground_truth`. The
//! other head's prediction enters as a constant: no gradient flows through a
//! refined target.

use crate::elem::Elem;
use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("delta must lie in [0, 1], got {0}")]
    BadDelta(f64),
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("schedule epoch {epoch} outside [0, {t_max}]")]
    BadEpoch { epoch: i64, t_max: u32 },
}

/// Elementwise `|prediction - ground_truth|`.
pub fn compute_deviation<F: Elem>(
    pred: &Array2<F>,
    gt: &Array2<F>,
) -> Result<Array2<F>, SupervisionError> {
    if pred.dim() != gt.dim() {
        return Err(SupervisionError::ShapeMismatch(pred.dim(), gt.dim()));
    }
    let mut out = pred.clone();
    out.zip_mut_with(gt, |p, &g| *p = (*p - g).abs());
    Ok(out)
}

/// Binary mask selecting the `floor(delta * H * W)` highest-deviation cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    grid: Array2<u8>,
    k: usize,
}

impl SelectionMask {
    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }

    pub fn ones(&self) -> usize {
        self.k
    }

    pub fn is_selected(&self, row: usize, col: usize) -> bool {
        self.grid[[row, col]] == 1
    }
}

/// Selects exactly `k = floor(delta * H * W)` cells with the largest
/// deviation. Equal values are broken by ascending row-major index, so the
/// mask is a deterministic function of its inputs.
pub fn select_mask<F: Elem>(
    deviation: &Array2<F>,
    delta: f64,
) -> Result<SelectionMask, SupervisionError> {
    if !(0.0..=1.0).contains(&delta) || !delta.is_finite() {
        return Err(SupervisionError::BadDelta(delta));
    }
    let (h, w) = deviation.dim();
    let cells = h * w;
    let k = (delta * cells as f64).floor() as usize;
    let k = k.min(cells);

    let mut grid = Array2::<u8>::zeros((h, w));
    if k == cells {
        grid.fill(1);
        return Ok(SelectionMask { grid, k });
    }
    if k > 0 {
        let flat = deviation.as_slice().expect("standard layout");
        let mut order: Vec<u32> = (0..cells as u32).collect();
        order.sort_unstable_by(|&a, &b| {
            flat[b as usize]
                .partial_cmp(&flat[a as usize])
                .expect("finite deviations")
                .then(a.cmp(&b))
        });
        let flat_mask = grid.as_slice_mut().expect("standard layout");
        for &idx in &order[..k] {
            flat_mask[idx as usize] = 1;
        }
    }
    Ok(SelectionMask { grid, k })
}

/// Refined target: `alpha * M . other_pred + (1 - alpha * M) . gt`.
///
/// Unmasked cells keep the ground truth bit-exactly; masked cells hold the
/// convex blend of the other head's prediction and the ground truth.
pub fn refine_target<F: Elem>(
    other_pred: &Array2<F>,
    gt: &Array2<F>,
    mask: &SelectionMask,
    alpha: f64,
) -> Result<Array2<F>, SupervisionError> {
    if other_pred.dim() != gt.dim() {
        return Err(SupervisionError::ShapeMismatch(other_pred.dim(), gt.dim()));
    }
    if other_pred.dim() != mask.grid.dim() {
        return Err(SupervisionError::ShapeMismatch(other_pred.dim(), mask.grid.dim()));
    }
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(SupervisionError::BadAlpha(alpha));
    }
    let a = F::of(alpha);
    let one_minus = F::of(1.0 - alpha);
    let mut out = gt.clone();
    ndarray::Zip::from(&mut out).and(other_pred).and(&mask.grid).for_each(|t, &o, &m| {
        if m == 1 {
            *t = a * o + one_minus * *t;
        }
    });
    Ok(out)
}

/// Loss reduction over the cells of one map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum of squared errors divided by the cell count, then averaged over
    /// the batch (the default).
    #[default]
    Mean,
    /// Plain sum of squared errors, averaged over the batch.
    Sum,
}

/// Everything the training loop needs from one loss evaluation.
pub struct ChsLossOutput<F: Elem> {
    pub loss: f64,
    pub conv_loss: f64,
    pub tran_loss: f64,
    /// `d loss / d conv_pred` with targets held constant.
    pub d_conv: Array3<F>,
    /// `d loss / d tran_pred` with targets held constant.
    pub d_tran: Array3<F>,
    /// Fraction of selected cells shared by the two heads' masks, averaged
    /// over the batch; 0 when `delta` selects no cells.
    pub mask_overlap: f64,
    /// Reduced `(conv, tran)` loss of each image before batch averaging.
    pub per_image_losses: Vec<(f64, f64)>,
    pub conv_targets: Vec<Array2<F>>,
    pub tran_targets: Vec<Array2<F>>,
}

/// Cross-head supervision loss over a batch of `[B, h, w]` predictions.
///
/// Per image: each head's mask comes from its own deviation against `gt`,
/// its refined target blends the *other* head's prediction, and the loss is
/// the sum of the two heads' reduced squared errors, averaged over the batch.
/// Targets are constants in the returned gradients.
pub fn chs_loss<F: Elem>(
    conv_pred: &Array3<F>,
    tran_pred: &Array3<F>,
    gt: &Array3<F>,
    delta: f64,
    alpha: f64,
    reduction: Reduction,
) -> Result<ChsLossOutput<F>, SupervisionError> {
    if conv_pred.dim() != gt.dim() {
        let (_, h, w) = conv_pred.dim();
        let (_, gh, gw) = gt.dim();
        return Err(SupervisionError::ShapeMismatch((h, w), (gh, gw)));
    }
    if tran_pred.dim() != gt.dim() {
        let (_, h, w) = tran_pred.dim();
        let (_, gh, gw) = gt.dim();
        return Err(SupervisionError::ShapeMismatch((h, w), (gh, gw)));
    }
    let (bsz, h, w) = gt.dim();
    let cells = (h * w) as f64;
    let norm = match reduction {
        Reduction::Mean => cells,
        Reduction::Sum => 1.0,
    };

    struct PerImage<F: Elem> {
        conv_sq: f64,
        tran_sq: f64,
        d_conv: Array2<F>,
        d_tran: Array2<F>,
        overlap: f64,
        conv_target: Array2<F>,
        tran_target: Array2<F>,
    }

    let per_image: Vec<Result<PerImage<F>, SupervisionError>> = (0..bsz)
        .into_par_iter()
        .map(|b| {
            let conv = conv_pred.index_axis(Axis(0), b).to_owned();
            let tran = tran_pred.index_axis(Axis(0), b).to_owned();
            let gt_b = gt.index_axis(Axis(0), b).to_owned();

            let conv_mask = select_mask(&compute_deviation(&conv, &gt_b)?, delta)?;
            let tran_mask = select_mask(&compute_deviation(&tran, &gt_b)?, delta)?;
            // Cross pairing: the conv head's target blends the transformer
            // head's prediction, and vice versa.
            let conv_target = refine_target(&tran, &gt_b, &conv_mask, alpha)?;
            let tran_target = refine_target(&conv, &gt_b, &tran_mask, alpha)?;

            let mut conv_sq = 0.0;
            let mut d_conv = Array2::<F>::zeros((h, w));
            ndarray::Zip::from(&mut d_conv).and(&conv).and(&conv_target).for_each(|d, &p, &t| {
                let r = p - t;
                conv_sq += r.f64() * r.f64();
                *d = r;
            });
            let mut tran_sq = 0.0;
            let mut d_tran = Array2::<F>::zeros((h, w));
            ndarray::Zip::from(&mut d_tran).and(&tran).and(&tran_target).for_each(|d, &p, &t| {
                let r = p - t;
                tran_sq += r.f64() * r.f64();
                *d = r;
            });

            let overlap = if conv_mask.ones() == 0 {
                0.0
            } else {
                let both = conv_mask
                    .grid()
                    .iter()
                    .zip(tran_mask.grid().iter())
                    .filter(|(&a, &b)| a == 1 && b == 1)
                    .count();
                both as f64 / conv_mask.ones() as f64
            };

            Ok(PerImage { conv_sq, tran_sq, d_conv, d_tran, overlap, conv_target, tran_target })
        })
        .collect();

    let mut conv_loss = 0.0;
    let mut tran_loss = 0.0;
    let mut overlap = 0.0;
    let mut d_conv = Array3::<F>::zeros((bsz, h, w));
    let mut d_tran = Array3::<F>::zeros((bsz, h, w));
    let mut conv_targets = Vec::with_capacity(bsz);
    let mut tran_targets = Vec::with_capacity(bsz);
    let mut per_image_losses = Vec::with_capacity(bsz);
    // The gradient of `sum(r^2) / (norm * B)` is `2 r / (norm * B)`.
    let gscale = F::of(2.0 / (norm * bsz as f64));
    for (b, item) in per_image.into_iter().enumerate() {
        let item = item?;
        per_image_losses.push((item.conv_sq / norm, item.tran_sq / norm));
        conv_loss += item.conv_sq / norm;
        tran_loss += item.tran_sq / norm;
        overlap += item.overlap;
        d_conv.index_axis_mut(Axis(0), b).assign(&item.d_conv.mapv(|v| v * gscale));
        d_tran.index_axis_mut(Axis(0), b).assign(&item.d_tran.mapv(|v| v * gscale));
        conv_targets.push(item.conv_target);
        tran_targets.push(item.tran_target);
    }
    conv_loss /= bsz as f64;
    tran_loss /= bsz as f64;

    Ok(ChsLossOutput {
        loss: conv_loss + tran_loss,
        conv_loss,
        tran_loss,
        d_conv,
        d_tran,
        mask_overlap: overlap / bsz as f64,
        per_image_losses,
        conv_targets,
        tran_targets,
    })
}

/// Reference dual-MSE loss: both heads regress directly onto the ground
/// truth. Written as an independent code path (it never builds masks or
/// targets) with the same reduction conventions as [`chs_loss`].
pub fn dual_mse_loss<F: Elem>(
    conv_pred: &Array3<F>,
    tran_pred: &Array3<F>,
    gt: &Array3<F>,
    reduction: Reduction,
) -> Result<ChsLossOutput<F>, SupervisionError> {
    if conv_pred.dim() != gt.dim() || tran_pred.dim() != gt.dim() {
        let (_, h, w) = conv_pred.dim();
        let (_, gh, gw) = gt.dim();
        return Err(SupervisionError::ShapeMismatch((h, w), (gh, gw)));
    }
    let (bsz, h, w) = gt.dim();
    let norm = match reduction {
        Reduction::Mean => (h * w) as f64,
        Reduction::Sum => 1.0,
    };
    let gscale = F::of(2.0 / (norm * bsz as f64));

    let mut conv_loss = 0.0;
    let mut tran_loss = 0.0;
    let mut per_image_losses = Vec::with_capacity(bsz);
    let mut d_conv = Array3::<F>::zeros((bsz, h, w));
    let mut d_tran = Array3::<F>::zeros((bsz, h, w));
    for b in 0..bsz {
        let mut conv_sq = 0.0;
        let gt_b = gt.index_axis(Axis(0), b);
        let mut d = d_conv.index_axis_mut(Axis(0), b);
        ndarray::Zip::from(&mut d).and(&conv_pred.index_axis(Axis(0), b)).and(&gt_b).for_each(
            |o, &p, &g| {
                let r = p - g;
                conv_sq += r.f64() * r.f64();
                *o = r * gscale;
            },
        );
        let mut tran_sq = 0.0;
        let mut d = d_tran.index_axis_mut(Axis(0), b);
        ndarray::Zip::from(&mut d).and(&tran_pred.index_axis(Axis(0), b)).and(&gt_b).for_each(
            |o, &p, &g| {
                let r = p - g;
                tran_sq += r.f64() * r.f64();
                *o = r * gscale;
            },
        );
        per_image_losses.push((conv_sq / norm, tran_sq / norm));
        conv_loss += conv_sq / norm;
        tran_loss += tran_sq / norm;
    }
    conv_loss /= bsz as f64;
    tran_loss /= bsz as f64;

    Ok(ChsLossOutput {
        loss: conv_loss + tran_loss,
        conv_loss,
        tran_loss,
        d_conv,
        d_tran,
        mask_overlap: 0.0,
        per_image_losses,
        conv_targets: Vec::new(),
        tran_targets: Vec::new(),
    })
}

/// Linear ramps of the noise ratio and the combination coefficient.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ScheduleState {
    pub delta_max: f64,
    pub alpha_max: f64,
    pub t_max: u32,
    pub epoch: u32,
}

impl ScheduleState {
    pub fn current(&self) -> (f64, f64) {
        schedule(self.epoch as i64, self.t_max, self.delta_max, self.alpha_max)
            .expect("epoch tracked within range")
    }
}

/// `delta_i = delta_max * i / T`, `alpha_i = alpha_max * i / T`, clamped to
/// their maxima. Epochs beyond `T` clamp with a warning.
pub fn schedule(
    epoch: i64,
    t_max: u32,
    delta_max: f64,
    alpha_max: f64,
) -> Result<(f64, f64), SupervisionError> {
    if epoch < 0 || t_max == 0 {
        return Err(SupervisionError::BadEpoch { epoch, t_max });
    }
    if epoch as u64 > u64::from(t_max) {
        log::warn!("schedule epoch {epoch} beyond T={t_max}; clamping to the maxima");
        return Ok((delta_max, alpha_max));
    }
    let frac = epoch as f64 / f64::from(t_max);
    Ok(((delta_max * frac).min(delta_max), (alpha_max * frac).min(alpha_max)))
}
