//! End-to-end tests of the `chs` binary: exit codes, error categories,
//! config plumbing, and the dataset → train → eval → plot flow.

use std::path::Path;
use std::process::{Command, Output};

fn chs(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chs"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Mini config shared by the CLI tests: tiny model, tiny dataset.
fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        r#"
out_dir = "out"

[model]
encoder = "toy_cnn"
encoder_stride = 8
encoder_channels = [8, 16, 32]
regression_upsample = 1

[model.conv_head]
n_blocks = 2
dilation = 2
channel_schedule = [16, 8]

[model.tran_head]
n_layers = 1
n_attention_heads = 4
ffn_multiplier = 2
positional_encoding = "sinusoidal_2d"

[train]
learning_rate = 1e-3
max_epochs = 2
crop_size = 32
scale_range = [1.0, 1.0]
hflip_prob = 0.5
batch_size = 4
seed = 5
delta_max = 0.1
alpha_max = 1.0

[synth]
image_size = 64
count_range = [8, 16]
head_radius_range = [2.0, 4.0]
background_texture = "noise"
seed = 3
n_train = 8
n_val = 4

[noise]
missing_rate = 0.1
shift_sigma = 0.0
seed = 11

[data]
dataset_dir = "dataset"
"#,
    )
    .unwrap();
    path
}

#[test]
fn full_pipeline_runs_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();

    let gen = chs(&["synth-gen", "--config", cfg], dir.path());
    assert!(gen.status.success(), "synth-gen failed: {}", stderr(&gen));
    assert!(dir.path().join("dataset/images/0000.png").exists());
    assert!(dir.path().join("dataset/noise_manifest.jsonl").exists());

    let train = chs(&["train", "--config", cfg], dir.path());
    assert!(train.status.success(), "train failed: {}", stderr(&train));
    let best = dir.path().join("out/train/best.ckpt");
    assert!(best.exists());

    let eval = chs(
        &["eval", "--config", cfg, "--set", "eval.checkpoint=\"out/train/best.ckpt\""],
        dir.path(),
    );
    assert!(eval.status.success(), "eval failed: {}", stderr(&eval));
    let stdout = String::from_utf8_lossy(&eval.stdout).into_owned();
    assert!(stdout.contains("average"), "eval output missing heads:\n{stdout}");
    assert!(dir.path().join("out/eval_report.json").exists());

    let plot = chs(
        &["plot", "--config", cfg, "--set", "plot.checkpoint=\"out/train/best.ckpt\""],
        dir.path(),
    );
    assert!(plot.status.success(), "plot failed: {}", stderr(&plot));
    assert!(dir.path().join("out/plots/panel_0000.png").exists());

    let predict = chs(
        &[
            "predict",
            "--config",
            cfg,
            "--set",
            "predict.checkpoint=\"out/train/best.ckpt\"",
            "--set",
            "predict.image=\"dataset/images/0000.png\"",
        ],
        dir.path(),
    );
    assert!(predict.status.success(), "predict failed: {}", stderr(&predict));
    assert!(dir.path().join("out/predict/maps.json").exists());
    assert!(dir.path().join("out/predict/average.png").exists());
}

#[test]
fn synth_gen_is_reproducible_and_respects_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();

    let first = chs(&["synth-gen", "--config", cfg], dir.path());
    assert!(first.status.success());
    let bytes_a = std::fs::read(dir.path().join("dataset/images/0003.png")).unwrap();
    let ann_a = std::fs::read(dir.path().join("dataset/train_annotations.jsonl")).unwrap();

    // Second run without overwrite: refused with the data category.
    let refused = chs(&["synth-gen", "--config", cfg], dir.path());
    assert!(!refused.status.success());
    assert!(stderr(&refused).starts_with("error[data]:"), "got: {}", stderr(&refused));

    // With overwrite: byte-identical regeneration.
    let again = chs(&["synth-gen", "--config", cfg, "--set", "synth.overwrite=true"], dir.path());
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(bytes_a, std::fs::read(dir.path().join("dataset/images/0003.png")).unwrap());
    assert_eq!(ann_a, std::fs::read(dir.path().join("dataset/train_annotations.jsonl")).unwrap());
}

#[test]
fn unknown_override_keys_are_rejected_with_config_category() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = chs(
        &["synth-gen", "--config", config.to_str().unwrap(), "--set", "synth.n_trian=4"],
        dir.path(),
    );
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.lines().count() == 1, "expected a single error line, got:\n{err}");
    assert!(err.starts_with("error[config]:"), "got: {err}");
    assert!(err.contains("n_trian"));
}

#[test]
fn missing_required_settings_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = chs(&["eval"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[config]:"), "got: {}", stderr(&out));
}

#[test]
fn eval_rejects_bad_checkpoint_with_checkpoint_category() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = chs(
        &[
            "eval",
            "--config",
            config.to_str().unwrap(),
            "--set",
            "eval.checkpoint=\"junk.ckpt\"",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error[checkpoint]:"), "got: {}", stderr(&out));
}

#[test]
fn tiny_ablate_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();
    assert!(chs(&["synth-gen", "--config", cfg], dir.path()).status.success());

    let out = chs(
        &[
            "ablate",
            "--config",
            cfg,
            "--set",
            "ablate.delta_max_values=[0.0, 0.1]",
            "--set",
            "ablate.n_seeds=1",
            "--set",
            "train.max_epochs=1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("out/ablate/report.csv")).unwrap();
    // 2 settings x 1 seed x 3 heads + 2 x 3 means + header.
    assert_eq!(csv.lines().count(), 13);

    let bad = chs(&["ablate", "--config", cfg, "--set", "ablate.delta_max_values=[1.5]"], dir.path());
    assert!(!bad.status.success());
    assert!(stderr(&bad).starts_with("error[train]:"));
}
