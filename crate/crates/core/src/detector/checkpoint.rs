//! Binary checkpoint format.
//!
//! ```text
//! "SMKW" | version: u32 LE | metadata length: u32 LE | metadata (UTF-8 JSON)
//!        | parameter data: f32 LE arrays in manifest order
//! ```
//!
//! The metadata echoes the detector config and lists every parameter with its
//! name, shape and byte offset into the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Detector, DetectorConfig, DetectorError};
use crate::neuralops::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMKW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint does not build a detector: {0}")]
    Model(#[from] DetectorError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: DetectorConfig,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 4],
    offset: usize,
}

fn corrupt(m: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(m.into())
}

pub fn to_bytes(model: &Detector<f32>) -> Vec<u8> {
    let mut offset = 0;
    let params = model
        .params()
        .iter()
        .map(|p| {
            let e = ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape(),
                offset,
            };
            offset += 4 * p.value.len();
            e
        })
        .collect();
    let manifest = Manifest {
        config: model.config().clone(),
        params,
    };
    let meta = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(12 + meta.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for p in model.params().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Detector<f32>, CheckpointError> {
    if bytes.len() < 12 {
        return Err(corrupt("file shorter than the header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let meta = bytes
        .get(12..12 + meta_len)
        .ok_or_else(|| corrupt("truncated metadata"))?;
    let manifest: Manifest =
        serde_json::from_slice(meta).map_err(|e| corrupt(format!("metadata: {e}")))?;
    let data = &bytes[12 + meta_len..];

    let mut model = Detector::<f32>::new(manifest.config)?;
    if manifest.params.len() != model.params().len() {
        return Err(corrupt(format!(
            "{} parameters listed, architecture has {}",
            manifest.params.len(),
            model.params().len()
        )));
    }
    let mut expected_end = 0;
    for entry in &manifest.params {
        let id = model
            .params()
            .find(&entry.name)
            .ok_or_else(|| corrupt(format!("unknown parameter `{}`", entry.name)))?;
        if model.params().value(id).shape() != entry.shape {
            return Err(corrupt(format!("shape mismatch for `{}`", entry.name)));
        }
        let len = entry.shape.iter().product::<usize>() * 4;
        let raw = data
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| corrupt(format!("truncated data for `{}`", entry.name)))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        *model.params_mut().value_mut(id) =
            Tensor::from_vec(entry.shape, values).map_err(|e| corrupt(e.to_string()))?;
        expected_end = expected_end.max(entry.offset + len);
    }
    if data.len() != expected_end {
        return Err(corrupt(format!(
            "{} trailing bytes after parameter data",
            data.len() as isize - expected_end as isize
        )));
    }
    Ok(model)
}

pub fn save_model(model: &Detector<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Detector<f32>, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
