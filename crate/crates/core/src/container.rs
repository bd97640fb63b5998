//! Self-describing binary container for named `f64` tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "PPDSTCK1"
//! offset 8   u64       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header:
//!                        {"kind": str, "meta": object,
//!                         "tensors": [{"name": str, "shape": [u64, ...]}, ...]}
//! offset 16+H          tensor payloads in header order, each the row-major
//!                      values as IEEE-754 f64, little-endian, no padding
//! ```
//!
//! The file ends exactly after the last payload.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"PPDSTCK1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed container: {0}")]
    Malformed(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(kind: &str, meta: &serde_json::Value, tensors: &[(String, Tensor)]) -> Vec<u8> {
    let header = Header {
        kind: kind.to_string(),
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Container, ContainerError> {
    let bad = |m: &str| ContainerError::Malformed(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| ContainerError::Malformed(e.to_string()))?;
    let mut offset = 16 + header_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + numel * 8)
            .ok_or_else(|| bad("truncated payload"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += numel * 8;
        let t = Tensor::new(entry.shape, data).map_err(|e| ContainerError::Malformed(e.to_string()))?;
        tensors.push((entry.name, t));
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

pub fn write(path: &Path, kind: &str, meta: &serde_json::Value, tensors: &[(String, Tensor)]) -> Result<(), ContainerError> {
    let io_err = |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&encode(kind, meta, tensors)).map_err(io_err)
}

pub fn read(path: &Path) -> Result<Container, ContainerError> {
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
