//! Counting evaluation: MAE, root-MSE, per-head and averaged-head counts,
//! and the easy/hard split at the median person count.

use crate::elem::Elem;
use crate::model::{ChsNet, ModelError};
use crate::synth::DatasetItem;
use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which prediction is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalHead {
    Conv,
    Tran,
    /// Cellwise average of the two heads' maps.
    Average,
}

impl std::fmt::Display for EvalHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalHead::Conv => write!(f, "conv"),
            EvalHead::Tran => write!(f, "tran"),
            EvalHead::Average => write!(f, "average"),
        }
    }
}

/// Counting metrics for one head over one dataset split.
///
/// `mse` follows the counting-literature convention: the square root of the
/// mean squared count error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub head: EvalHead,
    pub mae: f64,
    pub mse: f64,
    /// `(predicted, true)` count per image, in dataset order.
    pub per_image_counts: Vec<(f64, f64)>,
    pub easy_mae: f64,
    pub easy_mse: f64,
    pub hard_mae: f64,
    pub hard_mse: f64,
}

/// Reports for all three evaluation heads from a single forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalBundle {
    pub conv: EvalReport,
    pub tran: EvalReport,
    pub average: EvalReport,
}

impl EvalBundle {
    pub fn report(&self, head: EvalHead) -> &EvalReport {
        match head {
            EvalHead::Conv => &self.conv,
            EvalHead::Tran => &self.tran,
            EvalHead::Average => &self.average,
        }
    }
}

fn mae_mse(counts: &[(f64, f64)]) -> (f64, f64) {
    if counts.is_empty() {
        return (0.0, 0.0);
    }
    let n = counts.len() as f64;
    let mae = counts.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mse = (counts.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt();
    (mae, mse)
}

fn build_report(head: EvalHead, counts: Vec<(f64, f64)>) -> EvalReport {
    let (mae, mse) = mae_mse(&counts);
    // Ascending true count, index as the tie break; the half with the most
    // people is "hard" (sizes differ by at most one when n is odd).
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        counts[a].1.partial_cmp(&counts[b].1).expect("finite counts").then(a.cmp(&b))
    });
    let n_hard = counts.len() / 2;
    let n_easy = counts.len() - n_hard;
    let easy: Vec<(f64, f64)> = order[..n_easy].iter().map(|&i| counts[i]).collect();
    let hard: Vec<(f64, f64)> = order[n_easy..].iter().map(|&i| counts[i]).collect();
    let (easy_mae, easy_mse) = mae_mse(&easy);
    let (hard_mae, hard_mse) = mae_mse(&hard);
    EvalReport { head, mae, mse, per_image_counts: counts, easy_mae, easy_mse, hard_mae, hard_mse }
}

/// Evaluates a model over in-memory dataset items (evaluation-mode forward,
/// clean annotation counts as ground truth). One forward pass produces the
/// counts of all three heads; results are independent of `batch_size`.
pub fn evaluate_items<F: Elem>(
    model: &mut ChsNet<F>,
    items: &[DatasetItem],
    batch_size: usize,
) -> Result<EvalBundle, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let batch_size = batch_size.max(1);
    let mut conv_counts = Vec::with_capacity(items.len());
    let mut tran_counts = Vec::with_capacity(items.len());
    let mut avg_counts = Vec::with_capacity(items.len());

    for chunk in items.chunks(batch_size) {
        let (_, h, w) = chunk[0].image.dim();
        // Group only same-sized images into one forward; fall back to
        // singletons otherwise.
        let uniform = chunk.iter().all(|it| it.image.dim() == (3, h, w));
        let groups: Vec<&[DatasetItem]> = if uniform {
            vec![chunk]
        } else {
            chunk.chunks(1).collect()
        };
        for group in groups {
            let (_, gh, gw) = group[0].image.dim();
            let mut x = Array4::<F>::zeros((group.len(), 3, gh, gw));
            for (b, item) in group.iter().enumerate() {
                let img = item.image.mapv(|v| F::of(f64::from(v)));
                x.index_axis_mut(Axis(0), b).assign(&img);
            }
            let (conv, tran) = model.forward_batch(&x, false)?;
            for (b, item) in group.iter().enumerate() {
                let truth = item.annotations.count() as f64;
                let c: f64 = conv.index_axis(Axis(0), b).iter().map(|v| v.f64()).sum();
                let t: f64 = tran.index_axis(Axis(0), b).iter().map(|v| v.f64()).sum();
                conv_counts.push((c, truth));
                tran_counts.push((t, truth));
                avg_counts.push((0.5 * (c + t), truth));
            }
        }
    }

    Ok(EvalBundle {
        conv: build_report(EvalHead::Conv, conv_counts),
        tran: build_report(EvalHead::Tran, tran_counts),
        average: build_report(EvalHead::Average, avg_counts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_counts(pairs: &[(f64, f64)]) -> EvalReport {
        build_report(EvalHead::Average, pairs.to_vec())
    }

    #[test]
    fn mae_and_root_mse_arithmetic() {
        let r = fake_counts(&[(10.0, 11.0), (12.0, 11.0)]);
        assert!((r.mae - 1.0).abs() < 1e-12);
        assert!((r.mse - 1.0).abs() < 1e-12);

        let r = fake_counts(&[(10.0, 11.0), (14.0, 11.0)]);
        assert!((r.mae - 2.0).abs() < 1e-12);
        // sqrt((1 + 9) / 2)
        assert!((r.mse - (5.0f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_are_zero_error() {
        let r = fake_counts(&[(3.0, 3.0), (7.0, 7.0)]);
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.mse, 0.0);
    }

    #[test]
    fn easy_hard_split_partitions_by_count() {
        let r = fake_counts(&[(0.0, 10.0), (0.0, 40.0), (0.0, 20.0), (0.0, 30.0), (0.0, 50.0)]);
        // n = 5: easy gets 3 (fewest people), hard gets 2 (most people).
        // easy: true counts 10, 20, 30 -> mae 20; hard: 40, 50 -> mae 45.
        assert!((r.easy_mae - 20.0).abs() < 1e-12);
        assert!((r.hard_mae - 45.0).abs() < 1e-12);
    }

    #[test]
    fn split_ties_break_by_index() {
        let r = fake_counts(&[(5.0, 7.0), (9.0, 7.0), (7.0, 7.0), (0.0, 7.0)]);
        // All counts equal: easy = first two by index, hard = last two.
        assert!((r.easy_mae - (2.0 + 2.0) / 2.0).abs() < 1e-12);
        assert!((r.hard_mae - (0.0 + 7.0) / 2.0).abs() < 1e-12);
    }
}
