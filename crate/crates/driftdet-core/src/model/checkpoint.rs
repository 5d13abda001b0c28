//! Versioned JSON checkpoints: a flat name -> (shape, row-major values) map
//! for parameters, optional momentum buffers, and the architecture hash.
//!
//! `serde_json` prints `f64` with round-trip precision, so save/load is
//! bit-exact and checkpoint hashes are stable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{DetectorParams, ModelConfig};
use super::DetectorGrads;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "driftdet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub iteration: u64,
    pub params: BTreeMap<String, TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<BTreeMap<String, TensorRecord>>,
}

/// SHA-256 over the canonical JSON encoding of the architecture.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// SHA-256 over parameter names and little-endian value bytes.
pub fn params_hash(params: &DetectorParams) -> String {
    let mut hasher = Sha256::new();
    params.for_each_tensor(|name, data, _| {
        hasher.update(name.as_bytes());
        for v in data {
            hasher.update(v.to_le_bytes());
        }
    });
    hex::encode(hasher.finalize())
}

fn tensor_map(params: &DetectorParams) -> BTreeMap<String, TensorRecord> {
    let mut map = BTreeMap::new();
    params.for_each_tensor(|name, data, shape| {
        map.insert(name.to_string(), TensorRecord { shape, data: data.to_vec() });
    });
    map
}

pub fn save_checkpoint(
    path: &Path,
    params: &DetectorParams,
    momentum: Option<&DetectorGrads>,
    iteration: u64,
) -> Result<()> {
    let momentum_map = momentum.map(|m| {
        let mut map = BTreeMap::new();
        let mut slots = m.tensors().into_iter();
        params.for_each_tensor(|name, _, shape| {
            let buf = slots.next().expect("gradient store matches parameter order");
            map.insert(name.to_string(), TensorRecord { shape, data: buf.clone() });
        });
        map
    });
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        config_hash: config_hash(&params.config),
        iteration,
        params: tensor_map(params),
        momentum: momentum_map,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DetectorParams, Option<DetectorGrads>, u64)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::data(format!("not a checkpoint file: {}", path.display())));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    if ckpt.config_hash != config_hash(&ckpt.config) {
        return Err(Error::data("checkpoint config hash mismatch".to_string()));
    }

    let mut params = DetectorParams::zeros(&ckpt.config);
    let mut missing = Vec::new();
    params.for_each_tensor_mut(|name, data| match ckpt.params.get(name) {
        Some(rec) if rec.data.len() == data.len() => data.copy_from_slice(&rec.data),
        Some(_) => missing.push(format!("{name} (shape mismatch)")),
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::data(format!("checkpoint missing tensors: {}", missing.join(", "))));
    }

    let momentum = match &ckpt.momentum {
        None => None,
        Some(map) => {
            let mut grads = DetectorGrads::zeros_like(&params);
            let mut names = Vec::new();
            params.for_each_tensor(|name, _, _| names.push(name.to_string()));
            for (slot, name) in grads.tensors_mut().into_iter().zip(&names) {
                let rec = map.get(name).ok_or_else(|| {
                    Error::data(format!("checkpoint momentum missing tensor {name}"))
                })?;
                if rec.data.len() != slot.len() {
                    return Err(Error::data(format!("momentum shape mismatch for {name}")));
                }
                slot.copy_from_slice(&rec.data);
            }
            Some(grads)
        }
    };
    Ok((params, momentum, ckpt.iteration))
}
