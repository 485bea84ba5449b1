//! `chs` — dataset generation, training, evaluation, prediction, plotting
//! and ablation sweeps for cross-head supervision crowd counting.
//!
//! Every subcommand is driven by a TOML config plus repeatable
//! `--set key=value` overrides; there is no hidden state between
//! invocations. Failures exit non-zero with a single machine-parsable line:
//! `error[<category>]: <message>`.

mod error;
mod predict;

use chs_core::ablate::run_sweep;
use chs_core::checkpoint;
use chs_core::config::{load_config, RunConfig};
use chs_core::eval::{evaluate_items, EvalHead};
use chs_core::synth::{build_dataset, load_split, VAL_ANNOTATIONS};
use chs_core::train::train;
use chs_core::viz::{array_to_rgb, compose_panels, density_to_image, Panel};
use clap::{Args, Parser, Subcommand};
use error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "chs", version, about = "Cross-head supervision crowd counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; omitted sections fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key by dotted path, e.g. train.learning_rate=1e-3.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Master seed: re-seeds training, scene generation and noise injection.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (config key `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Accepted for completeness; runs are deterministic by construction.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with corrupted training annotations.
    SynthGen(Common),
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from a `last.ckpt` written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval(Common),
    /// Predict density maps and counts for one image.
    Predict(Common),
    /// Render image / ground-truth / prediction panels.
    Plot(Common),
    /// Sweep delta_max values over several seeds and tabulate MAE/MSE.
    Ablate(Common),
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    Ok(load_config(
        common.config.as_deref(),
        &common.set,
        common.seed,
        common.out.as_deref(),
        common.deterministic,
    )?)
}

fn cmd_synth_gen(common: &Common) -> Result<(), CliError> {
    let config = load(common)?;
    let dir = config.dataset_dir()?;
    let meta = build_dataset(
        &config.synth.scene_spec(),
        config.synth.n_train,
        config.synth.n_val,
        &config.noise,
        dir,
        config.synth.overwrite,
    )?;
    println!(
        "dataset written to {} ({} train / {} val, missing_rate {}, shift_sigma {})",
        dir.display(),
        meta.n_train,
        meta.n_val,
        meta.noise.missing_rate,
        meta.noise.shift_sigma
    );
    Ok(())
}

fn cmd_train(common: &Common, resume: Option<&PathBuf>) -> Result<(), CliError> {
    let config = load(common)?;
    let out = config.out_dir()?;
    let outcome = train(
        &config.model,
        &config.train,
        config.dataset_dir()?,
        &out.join("train"),
        resume.map(|p| p.as_path()),
    )?;
    println!(
        "trained {} epochs; best val MAE {:.3} at epoch {}",
        outcome.epochs_run, outcome.best_val_mae, outcome.best_epoch
    );
    println!("metrics: {}", outcome.metrics_path.display());
    println!("best checkpoint: {}", outcome.best_checkpoint.display());
    println!("last checkpoint: {}", outcome.last_checkpoint.display());
    Ok(())
}

fn cmd_eval(common: &Common) -> Result<(), CliError> {
    let config = load(common)?;
    let ckpt_path = config
        .eval
        .checkpoint
        .as_ref()
        .ok_or(chs_core::config::ConfigError::Missing("eval.checkpoint"))?;
    let ckpt = checkpoint::load(ckpt_path)?;
    let mut model = ckpt.build_model::<f32>()?;
    let val = load_split(config.dataset_dir()?, VAL_ANNOTATIONS)?;
    let bundle = evaluate_items(&mut model, &val.items, config.train.batch_size)?;

    let heads: Vec<EvalHead> = match config.eval.head {
        Some(h) => vec![h],
        None => vec![EvalHead::Conv, EvalHead::Tran, EvalHead::Average],
    };
    println!("{:>8}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}", "head", "MAE", "MSE", "easyMAE", "easyMSE", "hardMAE", "hardMSE");
    for head in heads {
        let r = bundle.report(head);
        println!(
            "{:>8}  {:>9.3}  {:>9.3}  {:>9.3}  {:>9.3}  {:>9.3}  {:>9.3}",
            head.to_string(),
            r.mae,
            r.mse,
            r.easy_mae,
            r.easy_mse,
            r.hard_mae,
            r.hard_mse
        );
    }
    if let Some(out) = &config.out_dir {
        std::fs::create_dir_all(out).map_err(CliError::io(out))?;
        let path = out.join("eval_report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&bundle).expect("serializes"))
            .map_err(CliError::io(&path))?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn cmd_plot(common: &Common) -> Result<(), CliError> {
    let config = load(common)?;
    let out = config.out_dir()?.join("plots");
    std::fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    let ckpt_path = config
        .plot
        .checkpoint
        .as_ref()
        .ok_or(chs_core::config::ConfigError::Missing("plot.checkpoint"))?;
    let ckpt = checkpoint::load(ckpt_path)?;
    let mut model = ckpt.build_model::<f32>()?;
    let val = load_split(config.dataset_dir()?, VAL_ANNOTATIONS)?;

    for &idx in &config.plot.indices {
        let item = val.items.get(idx).ok_or_else(|| {
            CliError::data(format!("plot index {idx} out of range ({} val images)", val.items.len()))
        })?;
        let pred = model.forward(&item.image.mapv(|v| v))?;
        let gt = chs_core::density::generate_density_map(
            &item.annotations,
            config.train.gt_kernel_size,
            config.train.gt_sigma,
            model.config.output_stride(),
        )?;
        let conv = pred.conv_map.grid().mapv(f64::from);
        let tran = pred.tran_map.grid().mapv(f64::from);
        let avg = (&conv + &tran) * 0.5;
        let peak = gt
            .grid()
            .iter()
            .chain(conv.iter())
            .chain(tran.iter())
            .chain(avg.iter())
            .cloned()
            .fold(0.0, f64::max);
        let upscale = model.config.output_stride() as usize;
        let panels = vec![
            Panel { label: "INPUT".into(), image: array_to_rgb(&item.image) },
            Panel {
                label: format!("GT {:.1}", chs_core::density::total_count(&gt)),
                image: density_to_image(gt.grid(), upscale, Some(peak)),
            },
            Panel {
                label: format!("CONV {:.1}", conv.sum()),
                image: density_to_image(&conv, upscale, Some(peak)),
            },
            Panel {
                label: format!("TRAN {:.1}", tran.sum()),
                image: density_to_image(&tran, upscale, Some(peak)),
            },
            Panel {
                label: format!("AVG {:.1}", avg.sum()),
                image: density_to_image(&avg, upscale, Some(peak)),
            },
        ];
        let path = out.join(format!("panel_{idx:04}.png"));
        compose_panels(&panels, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ablate(common: &Common) -> Result<(), CliError> {
    let config = load(common)?;
    let out = config.out_dir()?.join("ablate");
    let report = run_sweep(
        &config.model,
        &config.train,
        &config.ablate,
        config.dataset_dir()?,
        &out,
    )?;
    print!("{}", report.to_table());
    println!("report: {}", out.join("report.csv").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SynthGen(common) => cmd_synth_gen(common),
        Command::Train { common, resume } => cmd_train(common, resume.as_ref()),
        Command::Eval(common) => cmd_eval(common),
        Command::Predict(common) => load(common).and_then(|cfg| predict::run(&cfg)),
        Command::Plot(common) => cmd_plot(common),
        Command::Ablate(common) => cmd_ablate(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
