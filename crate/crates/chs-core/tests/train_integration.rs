//! End-to-end training behavior: smoke runs, checkpoint resume, the
//! degenerate equivalence with plain dual-MSE training, evaluation batch
//! invariance, and sweep reproducibility.

mod common;

use chs_core::ablate::{run_sweep, AblateConfig};
use chs_core::checkpoint;
use chs_core::eval::{evaluate_items, EvalHead};
use chs_core::model::ChsNet;
use chs_core::noise::NoiseSpec;
use chs_core::synth::{load_split, VAL_ANNOTATIONS};
use chs_core::train::{train, LossKind, TrainConfig, MetricsRecord};
use common::{mini_dataset, mini_model};
use std::path::Path;

fn mini_train_config(max_epochs: u32, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs,
        crop_size: 32,
        scale_range: (1.0, 1.0),
        hflip_prob: 0.5,
        batch_size: 4,
        seed,
        delta_max: 0.1,
        alpha_max: 1.0,
        ..TrainConfig::default()
    }
}

fn read_metrics(path: &Path) -> Vec<MetricsRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn smoke_run_writes_loadable_checkpoints_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mini_dataset(&data, 8, 4, &NoiseSpec::clean(1));

    let out = dir.path().join("run");
    let outcome = train(&mini_model(), &mini_train_config(2, 5), &data, &out, None).unwrap();
    assert_eq!(outcome.epochs_run, 2);
    assert_eq!(outcome.step_losses.len(), 2 * 2); // 8 images / batch 4, 2 epochs
    assert!(outcome.best_val_mae.is_finite());

    let metrics = read_metrics(&outcome.metrics_path);
    assert_eq!(metrics.len(), 2);
    assert_eq!(metrics[0].epoch, 1);
    assert!(metrics.iter().all(|m| m.train_loss.is_finite()));
    // Schedule ramps: epoch 1 of T=2 sits at half the maxima.
    assert!((metrics[0].delta - 0.05).abs() < 1e-12);
    assert!((metrics[1].delta - 0.1).abs() < 1e-12);

    let best = checkpoint::load(&outcome.best_checkpoint).unwrap();
    let mut model: ChsNet<f32> = best.build_model().unwrap();
    let val = load_split(&data, VAL_ANNOTATIONS).unwrap();
    let bundle = evaluate_items(&mut model, &val.items, 4).unwrap();
    assert!(bundle.average.mae.is_finite());

    let last = checkpoint::load(&outcome.last_checkpoint).unwrap();
    assert!(last.adam.is_some(), "last checkpoint carries optimizer state");
    assert_eq!(last.epoch, 2);
}

#[test]
fn resume_reproduces_uninterrupted_run_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mini_dataset(&data, 8, 4, &NoiseSpec::clean(2));

    // Uninterrupted 3-epoch run.
    let full_out = dir.path().join("full");
    let full = train(&mini_model(), &mini_train_config(3, 9), &data, &full_out, None).unwrap();

    // Stop after epoch 2, then resume into epoch 3.
    let part_out = dir.path().join("part");
    let mut cfg = mini_train_config(3, 9);
    cfg.stop_after = Some(2);
    let part = train(&mini_model(), &cfg, &data, &part_out, None).unwrap();
    assert_eq!(part.step_losses.len(), 4);

    let mut resume_cfg = mini_train_config(3, 9);
    resume_cfg.stop_after = None;
    let resumed = train(
        &mini_model(),
        &resume_cfg,
        &data,
        &part_out,
        Some(&part.last_checkpoint.clone()),
    )
    .unwrap();
    assert_eq!(resumed.step_losses.len(), 2, "resume runs only the final epoch");

    // The resumed epoch-3 losses must match the uninterrupted run within
    // 1e-6 (they are bit-identical: streams re-derive, state round-trips).
    let tail = &full.step_losses[4..];
    for (a, b) in tail.iter().zip(resumed.step_losses.iter()) {
        assert!((a - b).abs() <= 1e-6, "step loss diverged after resume: {a} vs {b}");
        assert_eq!(a, b, "expected bit-identical step losses after resume");
    }
    assert_eq!(read_metrics(&full.metrics_path).last(), read_metrics(&resumed.metrics_path).last());
}

#[test]
fn zero_delta_training_equals_dual_mse_reference() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mini_dataset(&data, 8, 4, &NoiseSpec { missing_rate: 0.2, shift_sigma: 1.0, seed: 3 });

    let mut chs_cfg = mini_train_config(2, 17);
    chs_cfg.delta_max = 0.0;
    let chs_run = train(&mini_model(), &chs_cfg, &data, &dir.path().join("chs"), None).unwrap();

    let mut ref_cfg = mini_train_config(2, 17);
    ref_cfg.loss = LossKind::DualMse;
    let ref_run = train(&mini_model(), &ref_cfg, &data, &dir.path().join("ref"), None).unwrap();

    assert_eq!(chs_run.step_losses.len(), ref_run.step_losses.len());
    for (a, b) in chs_run.step_losses.iter().zip(ref_run.step_losses.iter()) {
        assert!((a - b).abs() <= 1e-9, "step losses diverged: {a} vs {b}");
    }
}

#[test]
fn seeded_runs_produce_byte_identical_metric_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mini_dataset(&data, 8, 4, &NoiseSpec { missing_rate: 0.1, shift_sigma: 0.0, seed: 4 });

    let a = train(&mini_model(), &mini_train_config(2, 23), &data, &dir.path().join("a"), None)
        .unwrap();
    let b = train(&mini_model(), &mini_train_config(2, 23), &data, &dir.path().join("b"), None)
        .unwrap();
    let log_a = std::fs::read(&a.metrics_path).unwrap();
    let log_b = std::fs::read(&b.metrics_path).unwrap();
    assert_eq!(log_a, log_b);
}

#[test]
fn evaluation_is_invariant_to_batch_size() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mini_dataset(&data, 8, 5, &NoiseSpec::clean(5));

    let mut model = ChsNet::<f32>::new(mini_model(), 7).unwrap();
    let val = load_split(&data, VAL_ANNOTATIONS).unwrap();
    let r1 = evaluate_items(&mut model, &val.items, 1).unwrap();
    let r2 = evaluate_items(&mut model, &val.items, 3).unwrap();
    let r3 = evaluate_items(&mut model, &val.items, 5).unwrap();
    assert_eq!(r1.average.per_image_counts, r2.average.per_image_counts);
    assert_eq!(r2.average.per_image_counts, r3.average.per_image_counts);
    assert_eq!(r1.conv.per_image_counts, r3.conv.per_image_counts);
}

#[test]
fn easy_hard_split_is_a_true_partition() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mini_dataset(&data, 8, 5, &NoiseSpec::clean(6));
    let mut model = ChsNet::<f32>::new(mini_model(), 8).unwrap();
    let val = load_split(&data, VAL_ANNOTATIONS).unwrap();
    let bundle = evaluate_items(&mut model, &val.items, 4).unwrap();
    let r = &bundle.average;
    let n = r.per_image_counts.len();
    // Sizes differ by at most one and cover everything.
    let n_hard = n / 2;
    let n_easy = n - n_hard;
    assert_eq!(n_easy + n_hard, n);
    assert!(n_easy as i64 - n_hard as i64 <= 1);
    // Recomputing the weighted mean from the split matches the global MAE.
    let total = r.easy_mae * n_easy as f64 + r.hard_mae * n_hard as f64;
    assert!((total / n as f64 - r.mae).abs() < 1e-9);
}

#[test]
fn tiny_sweep_has_expected_cardinality_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mini_dataset(&data, 8, 4, &NoiseSpec { missing_rate: 0.1, shift_sigma: 0.0, seed: 9 });

    let ablate = AblateConfig { delta_max_values: vec![0.0, 0.1], n_seeds: 2 };
    let base = mini_train_config(1, 31);
    let report_a =
        run_sweep(&mini_model(), &base, &ablate, &data, &dir.path().join("sweep_a")).unwrap();
    assert_eq!(report_a.cells.len(), 4, "2 settings x 2 seeds");

    let csv = report_a.to_csv();
    // 4 cells x 3 heads + 2 settings x 3 heads of means + header.
    assert_eq!(csv.lines().count(), 1 + 12 + 6);
    for head in ["conv", "tran", "average"] {
        assert!(csv.contains(head));
    }
    let table = report_a.to_table();
    assert!(table.contains("delta_max"));

    // Same master seed, separate output directory: identical report.
    let report_b =
        run_sweep(&mini_model(), &base, &ablate, &data, &dir.path().join("sweep_b")).unwrap();
    assert_eq!(report_a.to_csv(), report_b.to_csv());

    // Degenerate sweep equals a single baseline run.
    let single = AblateConfig { delta_max_values: vec![0.0], n_seeds: 1 };
    let report_c =
        run_sweep(&mini_model(), &base, &single, &data, &dir.path().join("sweep_c")).unwrap();
    assert_eq!(report_c.cells.len(), 1);
    let cell_a = report_a.cell(0.0, 0).unwrap();
    let cell_c = report_c.cell(0.0, 0).unwrap();
    assert_eq!(cell_a.eval.average.mae, cell_c.eval.average.mae);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    mini_dataset(&data, 8, 4, &NoiseSpec::clean(10));

    // An absurd learning rate reliably blows the parameters up.
    let mut cfg = mini_train_config(3, 11);
    cfg.learning_rate = 1e18;
    match train(&mini_model(), &cfg, &data, &dir.path().join("run"), None) {
        Err(chs_core::train::TrainError::NonFiniteLoss { epoch, .. }) => {
            assert!(epoch >= 1);
        }
        Ok(_) => panic!("expected a non-finite loss abort"),
        Err(other) => panic!("unexpected error: {other}"),
    }
}
