//! Versioned checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON header
//! (format version, model config and its hash, epoch, schedule state, batch
//! norm running stats, parameter index), then a raw little-endian f64 payload
//! holding parameter tensors and, optionally, Adam moments. Values are stored
//! as f64 regardless of the model's element width, so f32 round-trips are
//! exact.

use crate::elem::Elem;
use crate::model::{ChsNet, ModelConfig};
use crate::optim::{AdamSlot, AdamW};
use crate::supervision::ScheduleState;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"CHSCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config hash mismatch: header says {expected:#018x}, config hashes to {actual:#018x}")]
    ConfigHash { expected: u64, actual: u64 },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

/// FNV-1a over the canonical JSON encoding of the model config.
pub fn config_hash(config: &ModelConfig) -> u64 {
    let text = serde_json::to_string(config).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnEntry {
    name: String,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    config_hash: u64,
    epoch: u32,
    schedule: ScheduleState,
    best_val_mae: Option<f64>,
    params: Vec<ParamEntry>,
    bn_stats: Vec<BnEntry>,
    adam_step: Option<u64>,
}

/// In-memory checkpoint contents.
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub epoch: u32,
    pub schedule: ScheduleState,
    pub best_val_mae: Option<f64>,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub bn_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
    /// Optimizer step count plus per-parameter `(m, v)` moments.
    pub adam: Option<(u64, Vec<(Vec<f64>, Vec<f64>)>)>,
}

impl Checkpoint {
    /// Captures a model (and optionally optimizer state) into a container.
    pub fn capture<F: Elem>(
        model: &mut ChsNet<F>,
        epoch: u32,
        schedule: ScheduleState,
        best_val_mae: Option<f64>,
        optimizer: Option<&AdamW>,
    ) -> Self {
        let model_config = model.config.clone();
        let bn_stats = model.bn_stats();
        let mut params = Vec::new();
        for p in model.params() {
            params.push((
                p.name.clone(),
                p.value.shape().to_vec(),
                p.value.iter().map(|v| v.f64()).collect(),
            ));
        }
        let adam = optimizer.and_then(|opt| {
            if opt.slots().is_empty() {
                None
            } else {
                Some((
                    opt.step_count,
                    opt.slots()
                        .iter()
                        .map(|s| {
                            (s.m.iter().copied().collect(), s.v.iter().copied().collect())
                        })
                        .collect(),
                ))
            }
        });
        Self { model_config, epoch, schedule, best_val_mae, params, bn_stats, adam }
    }

    /// Writes parameters (and Adam moments, when present) into an existing
    /// model and optimizer. The model config must hash-match.
    pub fn restore<F: Elem>(
        &self,
        model: &mut ChsNet<F>,
        optimizer: Option<&mut AdamW>,
    ) -> Result<(), CheckpointError> {
        if config_hash(&model.config) != config_hash(&self.model_config) {
            return Err(CheckpointError::Mismatch(
                "model config differs from checkpoint config".into(),
            ));
        }
        {
            let mut live = model.params();
            if live.len() != self.params.len() {
                return Err(CheckpointError::Mismatch(format!(
                    "parameter count {} vs checkpoint {}",
                    live.len(),
                    self.params.len()
                )));
            }
            for (p, (name, shape, data)) in live.iter_mut().zip(&self.params) {
                if &p.name != name || p.value.shape() != shape.as_slice() {
                    return Err(CheckpointError::Mismatch(format!(
                        "parameter {} (shape {:?}) vs checkpoint {} (shape {:?})",
                        p.name,
                        p.value.shape(),
                        name,
                        shape
                    )));
                }
                for (dst, src) in p.value.iter_mut().zip(data) {
                    *dst = F::of(*src);
                }
            }
        }
        model
            .set_bn_stats(&self.bn_stats)
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        if let Some(opt) = optimizer {
            if let Some((step, moments)) = &self.adam {
                if moments.len() != self.params.len() {
                    return Err(CheckpointError::Corrupt("adam moment count mismatch".into()));
                }
                let slots = self
                    .params
                    .iter()
                    .zip(moments)
                    .map(|((name, shape, _), (m, v))| AdamSlot {
                        name: name.clone(),
                        m: ArrayD::from_shape_vec(shape.clone(), m.clone())
                            .expect("moment shape matches"),
                        v: ArrayD::from_shape_vec(shape.clone(), v.clone())
                            .expect("moment shape matches"),
                    })
                    .collect();
                opt.restore(*step, slots);
            }
        }
        Ok(())
    }

    /// Builds a fresh model from the stored config and loads the parameters.
    pub fn build_model<F: Elem>(&self) -> Result<ChsNet<F>, CheckpointError> {
        let mut model = ChsNet::new(self.model_config.clone(), 0)
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        self.restore(&mut model, None)?;
        Ok(model)
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: ckpt.model_config.clone(),
        config_hash: config_hash(&ckpt.model_config),
        epoch: ckpt.epoch,
        schedule: ckpt.schedule,
        best_val_mae: ckpt.best_val_mae,
        params: ckpt
            .params
            .iter()
            .map(|(name, shape, _)| ParamEntry { name: name.clone(), shape: shape.clone() })
            .collect(),
        bn_stats: ckpt
            .bn_stats
            .iter()
            .map(|(name, mean, var)| BnEntry {
                name: name.clone(),
                mean: mean.clone(),
                var: var.clone(),
            })
            .collect(),
        adam_step: ckpt.adam.as_ref().map(|(s, _)| *s),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
    }
    let file = std::fs::File::create(path).map_err(io)?;
    let mut out = std::io::BufWriter::new(file);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&header_json).map_err(io)?;
    let mut write_f64s = |data: &[f64]| -> Result<(), CheckpointError> {
        for v in data {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    };
    for (_, _, data) in &ckpt.params {
        write_f64s(data)?;
    }
    if let Some((_, moments)) = &ckpt.adam {
        for (m, v) in moments {
            write_f64s(m)?;
            write_f64s(v)?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut input = std::io::BufReader::new(file);

    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes).map_err(io)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    input.read_exact(&mut header_json).map_err(io)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| CheckpointError::Corrupt(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(header.format_version));
    }
    let actual = config_hash(&header.model_config);
    if actual != header.config_hash {
        return Err(CheckpointError::ConfigHash { expected: header.config_hash, actual });
    }

    let mut read_f64s = |n: usize| -> Result<Vec<f64>, CheckpointError> {
        let mut buf = vec![0u8; n * 8];
        input.read_exact(&mut buf).map_err(io)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let mut params = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let n = entry.shape.iter().product();
        params.push((entry.name.clone(), entry.shape.clone(), read_f64s(n)?));
    }
    let adam = match header.adam_step {
        Some(step) => {
            let mut moments = Vec::with_capacity(header.params.len());
            for entry in &header.params {
                let n = entry.shape.iter().product();
                moments.push((read_f64s(n)?, read_f64s(n)?));
            }
            Some((step, moments))
        }
        None => None,
    };

    Ok(Checkpoint {
        model_config: header.model_config,
        epoch: header.epoch,
        schedule: header.schedule,
        best_val_mae: header.best_val_mae,
        params,
        bn_stats: header.bn_stats.into_iter().map(|b| (b.name, b.mean, b.var)).collect(),
        adam,
    })
}
