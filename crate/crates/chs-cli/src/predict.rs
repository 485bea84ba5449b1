//! `chs predict`: density maps and counts for a single image.

use crate::error::CliError;
use chs_core::checkpoint;
use chs_core::config::{ConfigError, RunConfig};
use chs_core::viz::{density_to_image, Panel};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Lossless on-disk form of a prediction: counts plus raw map values.
/// JSON floats round-trip exactly, so a reload is bit-identical.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MapsFile {
    pub stride: u32,
    pub counts: Counts,
    pub conv: Vec<Vec<f32>>,
    pub tran: Vec<Vec<f32>>,
    pub average: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Counts {
    pub conv: f64,
    pub tran: f64,
    pub average: f64,
}

fn grid_to_rows(grid: &ndarray::Array2<f32>) -> Vec<Vec<f32>> {
    grid.outer_iter().map(|row| row.to_vec()).collect()
}

pub fn run(config: &RunConfig) -> Result<(), CliError> {
    let ckpt_path =
        config.predict.checkpoint.as_ref().ok_or(ConfigError::Missing("predict.checkpoint"))?;
    let image_path = config.predict.image.as_ref().ok_or(ConfigError::Missing("predict.image"))?;
    let out = config.out_dir()?.join("predict");
    std::fs::create_dir_all(&out).map_err(CliError::io(&out))?;

    let ckpt = checkpoint::load(ckpt_path)?;
    let mut model = ckpt.build_model::<f32>()?;
    let x: Array3<f32> = chs_core::synth::load_image(image_path)?;
    let pred = model.forward(&x)?;
    let conv = pred.conv_map.grid().clone();
    let tran = pred.tran_map.grid().clone();
    let average = (&conv + &tran) * 0.5f32;
    let counts = Counts {
        conv: conv.iter().map(|&v| f64::from(v)).sum(),
        tran: tran.iter().map(|&v| f64::from(v)).sum(),
        average: average.iter().map(|&v| f64::from(v)).sum(),
    };
    println!(
        "counts: conv {:.2}, tran {:.2}, average {:.2}",
        counts.conv, counts.tran, counts.average
    );

    let upscale = model.config.output_stride() as usize;
    for (name, grid) in [("conv", &conv), ("tran", &tran), ("average", &average)] {
        let path = out.join(format!("{name}.png"));
        let img = density_to_image(&grid.mapv(f64::from), upscale, None);
        let panel = Panel { label: format!("{} {:.1}", name.to_uppercase(), grid.iter().map(|&v| f64::from(v)).sum::<f64>()), image: img };
        chs_core::viz::compose_panels(&[panel], &path)?;
    }

    let maps = MapsFile {
        stride: pred.conv_map.stride(),
        counts,
        conv: grid_to_rows(&conv),
        tran: grid_to_rows(&tran),
        average: grid_to_rows(&average),
    };
    let maps_path = out.join("maps.json");
    std::fs::write(&maps_path, serde_json::to_string(&maps).expect("maps serialize"))
        .map_err(CliError::io(&maps_path))?;
    println!("maps: {}", maps_path.display());
    Ok(())
}

/// Reads a maps file back; bit-identical to what was written.
pub fn load_maps(path: &Path) -> Result<MapsFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chs_core::checkpoint::{self, Checkpoint};
    use chs_core::config::load_config;
    use chs_core::model::{ChsNet, ModelConfig};
    use chs_core::supervision::ScheduleState;
    use chs_core::synth::{render_scene, BackgroundTexture, SceneSpec};

    #[test]
    fn predict_maps_roundtrip_bit_identically() {
        let dir = tempfile::tempdir().unwrap();

        let mut model = ChsNet::<f32>::new(ModelConfig::micro(), 3).unwrap();
        let sched = ScheduleState { delta_max: 0.1, alpha_max: 1.0, t_max: 10, epoch: 10 };
        let ckpt_path = dir.path().join("model.ckpt");
        checkpoint::save(&ckpt_path, &Checkpoint::capture(&mut model, 10, sched, None, None))
            .unwrap();

        let spec = SceneSpec {
            image_size: 64,
            count_range: (5, 5),
            head_radius_range: (2.0, 3.0),
            background_texture: BackgroundTexture::Flat,
            seed: 1,
        };
        let (img, _) = render_scene(&spec).unwrap();
        let img_path = dir.path().join("scene.png");
        img.save(&img_path).unwrap();

        let config = load_config(
            None,
            &[
                format!("predict.checkpoint={:?}", ckpt_path),
                format!("predict.image={:?}", img_path),
            ],
            None,
            Some(dir.path()),
            false,
        )
        .unwrap();
        run(&config).unwrap();

        let maps_path = dir.path().join("predict").join("maps.json");
        let loaded = load_maps(&maps_path).unwrap();
        // Re-serializing the loaded maps reproduces the file byte for byte:
        // every f32 survives the JSON round-trip exactly.
        let rewritten = serde_json::to_string(&loaded).unwrap();
        assert_eq!(std::fs::read_to_string(&maps_path).unwrap(), rewritten);
        assert_eq!(loaded.stride, 2);
        // The averaged map is f32 cellwise, so its sum matches the mean of
        // the head counts only up to single-precision rounding.
        let lin = (loaded.counts.average - 0.5 * (loaded.counts.conv + loaded.counts.tran)).abs();
        assert!(lin < 1e-3 * loaded.counts.average.max(1.0), "linearity off by {lin}");
    }
}
