//! OSVT checkpoints.
//!
//! Layout: `"OSVT"`, u32 version, u64 manifest length, the JSON manifest, then
//! every tensor as little-endian f32 in manifest order. The manifest holds the
//! model config and a table of `{name, shape, offset}` where `offset` counts
//! bytes from the start of the tensor data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Tensor;

pub const OSVT_MAGIC: &[u8; 4] = b"OSVT";
pub const OSVT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("tensor `{tensor}` needs {expected} bytes but {actual} are present")]
    Length {
        tensor: String,
        expected: u64,
        actual: u64,
    },
    #[error("checkpoint config conflicts with the runtime config: {}", fields.join("; "))]
    ConfigConflict { fields: Vec<String> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest<C> {
    config: C,
    tensors: Vec<TensorEntry>,
}

fn format_err(offset: usize, reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn encode_checkpoint(params: &ModelParams<f32>, config: &ModelConfig) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            entry
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { config, tensors }).expect("manifest serializes");
    let mut out = Vec::with_capacity(PREAMBLE + manifest.len() + offset as usize);
    out.extend_from_slice(OSVT_MAGIC);
    out.extend_from_slice(&OSVT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses the container without interpreting the tensors as a model.
pub fn read_osvt_tensors(
    bytes: &[u8],
) -> Result<(serde_json::Value, Vec<(String, Tensor<f32>)>), CheckpointError> {
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Length {
            tensor: "<header>".into(),
            expected: PREAMBLE as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[0..4] != OSVT_MAGIC {
        return Err(format_err(
            0,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4])),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != OSVT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let blob_start = (PREAMBLE as u64)
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            format_err(
                8,
                format!("manifest length {manifest_len} runs past the end of the file"),
            )
        })? as usize;
    let manifest: Manifest<serde_json::Value> =
        serde_json::from_slice(&bytes[PREAMBLE..blob_start])
            .map_err(|e| format_err(PREAMBLE, format!("manifest is not valid JSON: {e}")))?;
    let blob = &bytes[blob_start..];
    let mut cursor = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        if entry.offset != cursor {
            return Err(format_err(
                blob_start,
                format!(
                    "tensor `{}` starts at {} but the previous tensor ends at {cursor}",
                    entry.name, entry.offset
                ),
            ));
        }
        let numel: usize = entry.shape.iter().product();
        let need = 4 * numel as u64;
        let available = blob.len() as u64 - cursor.min(blob.len() as u64);
        if need > available {
            return Err(CheckpointError::Length {
                tensor: entry.name,
                expected: need,
                actual: available,
            });
        }
        let raw = &blob[cursor as usize..(cursor + need) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&entry.shape, data).map_err(ModelError::from)?;
        tensors.push((entry.name, t));
        cursor += need;
    }
    if cursor != blob.len() as u64 {
        return Err(CheckpointError::Length {
            tensor: "<all tensors>".into(),
            expected: cursor,
            actual: blob.len() as u64,
        });
    }
    Ok((manifest.config, tensors))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams<f32>, ModelConfig), CheckpointError> {
    let (config, tensors) = read_osvt_tensors(bytes)?;
    let config: ModelConfig =
        serde_json::from_value(config).map_err(|e| format_err(PREAMBLE, format!("config: {e}")))?;
    config.validate()?;
    let params = ModelParams::from_tensors(&config, tensors)?;
    Ok((params, config))
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, config)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(ModelParams<f32>, ModelConfig), CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and insists its config equals `runtime`.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    runtime: &ModelConfig,
) -> Result<ModelParams<f32>, CheckpointError> {
    let (params, config) = load_checkpoint(path)?;
    let fields = config.diff(runtime);
    if !fields.is_empty() {
        return Err(CheckpointError::ConfigConflict { fields });
    }
    Ok(params)
}
