//! Sweep runner: trains one model per (delta_max, seed) cell on a fixed
//! dataset and reports MAE / MSE for the conv, transformer and averaged
//! evaluation heads, as CSV and as an aligned text table.

use crate::checkpoint;
use crate::eval::{evaluate_items, EvalBundle, EvalHead};
use crate::model::ModelConfig;
use crate::rng::derive_seed_indexed;
use crate::synth::{load_split, VAL_ANNOTATIONS};
use crate::train::{train, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// `[ablate]` section of the run config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Swept `delta_max` values; each must lie in [0, 1].
    pub delta_max_values: Vec<f64>,
    /// Number of seeds per setting; actual seeds derive from the train seed.
    pub n_seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { delta_max_values: vec![0.0, 0.1, 0.3], n_seeds: 3 }
    }
}

/// One trained sweep cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub delta_max: f64,
    pub seed_index: usize,
    pub seed: u64,
    pub best_epoch: u32,
    pub best_val_mae: f64,
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    /// Best-checkpoint evaluation for all three heads.
    pub eval: EvalBundle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, delta_max: f64, seed_index: usize) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.delta_max == delta_max && c.seed_index == seed_index)
    }

    /// Mean validation MAE of a head across seeds at one setting.
    pub fn mean_mae(&self, delta_max: f64, head: EvalHead) -> f64 {
        let maes: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.delta_max == delta_max)
            .map(|c| c.eval.report(head).mae)
            .collect();
        maes.iter().sum::<f64>() / maes.len() as f64
    }

    /// CSV rows: one per (setting, seed, head), then per-setting means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta_max,seed_index,head,mae,mse\n");
        for c in &self.cells {
            for head in [EvalHead::Conv, EvalHead::Tran, EvalHead::Average] {
                let r = c.eval.report(head);
                let _ = writeln!(
                    out,
                    "{},{},{},{:.4},{:.4}",
                    c.delta_max, c.seed_index, head, r.mae, r.mse
                );
            }
        }
        let mut deltas: Vec<f64> = self.cells.iter().map(|c| c.delta_max).collect();
        deltas.dedup();
        for d in deltas {
            for head in [EvalHead::Conv, EvalHead::Tran, EvalHead::Average] {
                let _ = writeln!(out, "{},mean,{},{:.4},", d, head, self.mean_mae(d, head));
            }
        }
        out
    }

    /// Human-readable aligned table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>9}  {:>4}  {:>8}  {:>9}  {:>9}", "delta_max", "seed", "head", "MAE", "MSE");
        for c in &self.cells {
            for head in [EvalHead::Conv, EvalHead::Tran, EvalHead::Average] {
                let r = c.eval.report(head);
                let _ = writeln!(
                    out,
                    "{:>9}  {:>4}  {:>8}  {:>9.3}  {:>9.3}",
                    c.delta_max,
                    c.seed_index,
                    head.to_string(),
                    r.mae,
                    r.mse
                );
            }
        }
        let mut deltas: Vec<f64> = self.cells.iter().map(|c| c.delta_max).collect();
        deltas.dedup();
        for d in deltas {
            let _ = writeln!(
                out,
                "{:>9}  {:>4}  {:>8}  {:>9.3}  (mean over seeds)",
                d,
                "all",
                "average",
                self.mean_mae(d, EvalHead::Average)
            );
        }
        out
    }
}

/// Runs the full sweep sequentially. Cell seeds derive from
/// `(train.seed, seed index)` only, so results are independent of execution
/// order and the same seed index is paired across settings.
pub fn run_sweep(
    model_config: &ModelConfig,
    base_train: &TrainConfig,
    ablate: &AblateConfig,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<SweepReport, TrainError> {
    if ablate.delta_max_values.is_empty() || ablate.n_seeds == 0 {
        return Err(TrainError::BadConfig("ablate sweep must have settings and seeds".into()));
    }
    for &d in &ablate.delta_max_values {
        if !(0.0..=1.0).contains(&d) {
            return Err(TrainError::BadConfig(format!(
                "ablate delta_max value {d} outside [0, 1]"
            )));
        }
    }
    let val_split = load_split(dataset_dir, VAL_ANNOTATIONS)?;

    let mut cells = Vec::new();
    for &delta_max in &ablate.delta_max_values {
        for seed_index in 0..ablate.n_seeds {
            let seed = derive_seed_indexed(base_train.seed, "ablate-seed", seed_index as u64);
            let cell_cfg = TrainConfig { delta_max, seed, ..base_train.clone() };
            let run_dir = out_dir.join(format!("delta_{delta_max}")).join(format!("seed_{seed_index}"));
            log::info!("sweep cell delta_max={delta_max} seed_index={seed_index}");
            let outcome = train(model_config, &cell_cfg, dataset_dir, &run_dir, None)?;

            let best = checkpoint::load(&outcome.best_checkpoint)?;
            let mut model = best.build_model::<f32>()?;
            let eval = evaluate_items(&mut model, &val_split.items, cell_cfg.batch_size)?;

            cells.push(SweepCell {
                delta_max,
                seed_index,
                seed,
                best_epoch: outcome.best_epoch,
                best_val_mae: outcome.best_val_mae,
                run_dir,
                metrics_path: outcome.metrics_path,
                eval,
            });
        }
    }
    let report = SweepReport { cells };

    std::fs::create_dir_all(out_dir)
        .map_err(|source| TrainError::Io { path: out_dir.to_path_buf(), source })?;
    std::fs::write(out_dir.join("report.csv"), report.to_csv())
        .map_err(|source| TrainError::Io { path: out_dir.join("report.csv"), source })?;
    std::fs::write(out_dir.join("report.txt"), report.to_table())
        .map_err(|source| TrainError::Io { path: out_dir.join("report.txt"), source })?;
    Ok(report)
}
