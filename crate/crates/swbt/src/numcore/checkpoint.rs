//! Versioned checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic + version, ASCII "SWBTCK01"
//! 8       4     u32 manifest length M
//! 12      M     manifest JSON (dtype, free-form metadata, ordered param list)
//! 12+M    ...   raw parameter values, little-endian, manifest order
//! end-32  32    SHA-256 over every preceding byte
//! ```
//!
//! The manifest order is the parameter store's insertion order, so a store
//! saved and reloaded reproduces identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{numel, ParamStore, Tensor};
use crate::util::sha256_raw;
use crate::{Dtype, Scalar};

const MAGIC: &[u8; 6] = b"SWBTCK";
const VERSION: &[u8; 2] = b"01";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub dtype: Dtype,
    /// Free-form provenance: config hashes, stage names, dataset digests.
    pub meta: BTreeMap<String, String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    /// Header is not a supported checkpoint version (covers corrupted or
    /// foreign headers as well).
    VersionMismatch { found: String },
    /// The file ends before the declared content does.
    Truncated { needed: usize, have: usize },
    /// Trailing digest does not match the content.
    ChecksumMismatch,
    /// Stored element type differs from the requested one.
    DtypeMismatch { expected: Dtype, found: Dtype },
    /// Manifest JSON is unreadable or inconsistent.
    Malformed(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::VersionMismatch { found } => {
                write!(f, "not a supported checkpoint header: {found:?}")
            }
            CheckpointError::Truncated { needed, have } => {
                write!(f, "checkpoint truncated: need {needed} bytes, have {have}")
            }
            CheckpointError::ChecksumMismatch => write!(f, "checkpoint checksum mismatch"),
            CheckpointError::DtypeMismatch { expected, found } => {
                write!(f, "checkpoint dtype {found}, expected {expected}")
            }
            CheckpointError::Malformed(m) => write!(f, "malformed checkpoint manifest: {m}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    params: &ParamStore<S>,
    meta: &BTreeMap<String, String>,
) -> Result<CheckpointMeta, CheckpointError> {
    let manifest = CheckpointMeta {
        dtype: S::DTYPE,
        meta: meta.clone(),
        params: params
            .iter()
            .map(|(n, p)| ParamEntry {
                name: n.to_string(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let mjson =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut bytes = Vec::with_capacity(
        8 + 4 + mjson.len() + params.total_values() * S::DTYPE.size() + 32,
    );
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(VERSION);
    bytes.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&mjson);
    for (_, p) in params.iter() {
        for v in &p.tensor.values {
            v.write_le(&mut bytes);
        }
    }
    let digest = sha256_raw(&bytes);
    bytes.extend_from_slice(&digest);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(manifest)
}

pub fn load_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(ParamStore<S>, CheckpointMeta), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated {
            needed: 12,
            have: bytes.len(),
        });
    }
    if &bytes[0..6] != MAGIC || &bytes[6..8] != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[0..8]).into_owned(),
        });
    }
    let mlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let body_start = 12 + mlen;
    if bytes.len() < body_start {
        return Err(CheckpointError::Truncated {
            needed: body_start,
            have: bytes.len(),
        });
    }
    let manifest: CheckpointMeta = serde_json::from_slice(&bytes[12..body_start])
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if manifest.dtype != S::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            expected: S::DTYPE,
            found: manifest.dtype,
        });
    }
    let elem = S::DTYPE.size();
    let total: usize = manifest.params.iter().map(|p| numel(&p.shape)).sum();
    let needed = body_start + total * elem + 32;
    if bytes.len() < needed {
        return Err(CheckpointError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    let content_end = needed - 32;
    let digest = sha256_raw(&bytes[..content_end]);
    if digest != bytes[content_end..needed] {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let mut store = ParamStore::new();
    let mut off = body_start;
    for entry in &manifest.params {
        let n = numel(&entry.shape);
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(S::read_le(&bytes[off..off + elem]));
            off += elem;
        }
        let t = Tensor::new(entry.shape.clone(), values)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        store
            .insert(&entry.name, t)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    Ok((store, manifest))
}
