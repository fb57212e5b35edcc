//! `.ckpt` files: little-endian u64 header length, a JSON header listing each
//! tensor's name, shape and byte offset into the blob, then the blob of
//! little-endian f64 values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::nn::ParamSet;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode(params: &ParamSet, metadata: &serde_json::Value) -> Vec<u8> {
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(params.len());
    let mut blob = Vec::with_capacity(8 * params.num_scalars());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += 8 * t.numel();
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        tensors,
        metadata: metadata.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + blob.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<(ParamSet, serde_json::Value), CheckpointError> {
    let err = |msg: String| CheckpointError::Format {
        path: origin.to_string(),
        msg,
    };
    let len_bytes: [u8; 8] = bytes.get(..8).and_then(|b| b.try_into().ok()).ok_or_else(|| err("missing header length".into()))?;
    let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| err("header length overflows".into()))?;
    let header_bytes = bytes.get(8..8usize.saturating_add(hlen)).ok_or_else(|| err(format!("header of {hlen} bytes is truncated")))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| err(format!("header: {e}")))?;
    let blob = &bytes[8 + hlen..];
    let mut params = ParamSet::new();
    let mut expected_offset = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        if entry.offset != expected_offset {
            return Err(err(format!("tensor `{}` offset {} is not contiguous (expected {expected_offset})", entry.name, entry.offset)));
        }
        let raw = blob
            .get(entry.offset..entry.offset + 8 * n)
            .ok_or_else(|| err(format!("tensor `{}` data runs past end of file", entry.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if params.contains(&entry.name) {
            return Err(err(format!("duplicate tensor `{}`", entry.name)));
        }
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data).map_err(|e| err(e.to_string()))?);
        expected_offset += 8 * n;
    }
    if blob.len() != expected_offset {
        return Err(err(format!("{} unexpected trailing bytes", blob.len() - expected_offset)));
    }
    Ok((params, header.metadata))
}

pub fn save(path: &Path, params: &ParamSet, metadata: &serde_json::Value) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params, metadata)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(ParamSet, serde_json::Value), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, &path.display().to_string())
}
