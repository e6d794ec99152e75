//! Checkpoint container: model parameters, Adam state, batch-norm running
//! statistics and the training configuration, round-trippable bit-exactly.
//!
//! Same container discipline as `.vol`: magic `CKPT`, u32-LE JSON header
//! length, a JSON manifest naming every tensor with shape and byte offset,
//! then concatenated little-endian f32 payloads.

use super::{AdamState, TrainConfig, TrainError};
use crate::model::{init_params, ModelParams};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CKPT";

/// Complete training state after some number of finished epochs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Number of completed epochs; resuming starts at this epoch index.
    pub epoch: usize,
    pub params: ModelParams<f32>,
    pub adam: AdamState,
    pub best_val_psnr: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct BnEntry {
    name: String,
    initialized: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    best_val_psnr: Option<f64>,
    best_epoch: Option<usize>,
    rng: RngInfo,
    tensors: Vec<TensorEntry>,
    bn: Vec<BnEntry>,
}

#[derive(Serialize, Deserialize)]
struct RngInfo {
    scheme: String,
    seed: u64,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(format!("{}: {}", path.display(), reason.into()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: &[f32]| {
        entries.push(TensorEntry {
            name,
            shape,
            offset: payload.len(),
            len: values.len(),
        });
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for t in &ckpt.params.tensors {
        push(t.name.clone(), t.shape.clone(), &t.values);
    }
    for (t, m) in ckpt.params.tensors.iter().zip(&ckpt.adam.m) {
        push(format!("adam.m.{}", t.name), t.shape.clone(), m);
    }
    for (t, v) in ckpt.params.tensors.iter().zip(&ckpt.adam.v) {
        push(format!("adam.v.{}", t.name), t.shape.clone(), v);
    }
    for layer in &ckpt.params.bn {
        let c = layer.stats.mean.len();
        push(
            format!("{}.running_mean", layer.name),
            vec![c],
            &layer.stats.mean,
        );
        push(
            format!("{}.running_var", layer.name),
            vec![c],
            &layer.stats.var,
        );
    }
    let manifest = Manifest {
        version: 1,
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        adam_step: ckpt.adam.step,
        best_val_psnr: ckpt.best_val_psnr,
        best_epoch: ckpt.best_epoch,
        rng: RngInfo {
            scheme: "epoch-derived-chacha8".into(),
            seed: ckpt.config.seed,
        },
        tensors: entries,
        bn: ckpt
            .params
            .bn
            .iter()
            .map(|l| BnEntry {
                name: l.name.clone(),
                initialized: l.stats.initialized,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(8 + header.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| ckpt_err(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(ckpt_err(path, "bad magic; not a checkpoint file"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(ckpt_err(path, "truncated header"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| ckpt_err(path, format!("malformed manifest: {e}")))?;
    let payload = &bytes[8 + header_len..];

    let read_tensor = |entry: &TensorEntry| -> Result<Vec<f32>, TrainError> {
        let start = entry.offset;
        let end = start + 4 * entry.len;
        if end > payload.len() {
            return Err(ckpt_err(
                path,
                format!("tensor {} extends past payload", entry.name),
            ));
        }
        Ok(payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };
    let by_name: std::collections::HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let lookup = |name: &str| -> Result<&TensorEntry, TrainError> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| ckpt_err(path, format!("missing tensor {name}")))
    };

    // rebuild the parameter skeleton from the config, then fill from payload
    let mut params = init_params(&manifest.config.model).map_err(TrainError::Model)?;
    for t in &mut params.tensors {
        let entry = lookup(&t.name)?;
        if entry.shape != t.shape {
            return Err(ckpt_err(
                path,
                format!(
                    "tensor {} shape {:?} does not match config shape {:?}",
                    t.name, entry.shape, t.shape
                ),
            ));
        }
        t.values = read_tensor(entry)?;
    }
    let mut m = Vec::with_capacity(params.tensors.len());
    let mut v = Vec::with_capacity(params.tensors.len());
    for t in &params.tensors {
        m.push(read_tensor(lookup(&format!("adam.m.{}", t.name))?)?);
        v.push(read_tensor(lookup(&format!("adam.v.{}", t.name))?)?);
    }
    let bn_init: std::collections::HashMap<&str, bool> = manifest
        .bn
        .iter()
        .map(|e| (e.name.as_str(), e.initialized))
        .collect();
    for layer in &mut params.bn {
        layer.stats.mean = read_tensor(lookup(&format!("{}.running_mean", layer.name))?)?;
        layer.stats.var = read_tensor(lookup(&format!("{}.running_var", layer.name))?)?;
        layer.stats.initialized = *bn_init
            .get(layer.name.as_str())
            .ok_or_else(|| ckpt_err(path, format!("missing bn entry {}", layer.name)))?;
    }

    Ok(Checkpoint {
        config: manifest.config,
        epoch: manifest.epoch,
        params,
        adam: AdamState {
            step: manifest.adam_step,
            m,
            v,
        },
        best_val_psnr: manifest.best_val_psnr,
        best_epoch: manifest.best_epoch,
    })
}
