//! Binary checkpoint persistence.
//!
//! Layout: `"POCO"` magic, u32 format version (little-endian), u64 header
//! length, a JSON header (run metadata plus one entry per tensor with
//! name, shape, byte offset, element count and FNV-1a checksum), then the
//! concatenated little-endian f32 payloads in header order. Serialization
//! is canonical — equal checkpoints produce byte-equal files — and every
//! tensor is verified against its checksum on load.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, NamedTensor};
use crate::ops::fnv1a64;

pub const MAGIC: [u8; 4] = *b"POCO";
pub const VERSION: u32 = 1;

/// Run provenance stored in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub use_polar: bool,
    pub seed: u64,
    /// `"pretrained"` or `"finetuned"`
    pub phase: String,
    /// epochs completed (pretraining) or the best-validation epoch
    pub epoch: usize,
    /// mean training loss per epoch, in epoch order
    #[serde(default)]
    pub epoch_loss: Vec<f64>,
    #[serde(default)]
    pub best_val_accuracy: Option<f64>,
}

/// A model snapshot plus the metadata needed to reuse it consistently.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    /// byte offset into the payload section
    offset: u64,
    /// element count (4 bytes each)
    len: u64,
    checksum: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    entries: Vec<HeaderEntry>,
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

impl Checkpoint {
    /// Canonical binary serialization.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(CheckpointError::Layout(format!(
                    "tensor `{}` appears twice",
                    t.name
                ))
                .into());
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(CheckpointError::Layout(format!(
                    "tensor `{}`: shape {:?} does not match {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                ))
                .into());
            }
            let bytes = f32_bytes(&t.data);
            entries.push(HeaderEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: payload.len() as u64,
                len: t.data.len() as u64,
                checksum: fnv1a64(&bytes),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = serde_json::to_string(&Header { meta: self.meta.clone(), entries })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated(format!(
                "{} bytes is shorter than the 16-byte preamble",
                bytes.len()
            ))
            .into());
        }
        if bytes[0..4] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(
                CheckpointError::VersionMismatch { expected: VERSION, found: version }.into()
            );
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize.checked_add(header_len).ok_or_else(|| {
            CheckpointError::Layout(format!("header length {header_len} overflows"))
        })?;
        if bytes.len() < payload_start {
            return Err(CheckpointError::Truncated(format!(
                "header claims {header_len} bytes but only {} remain",
                bytes.len() - 16
            ))
            .into());
        }
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| CheckpointError::Layout(format!("header: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut seen = HashSet::new();
        let mut tensors = Vec::with_capacity(header.entries.len());
        let mut expected_offset = 0u64;
        for e in &header.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(
                    CheckpointError::Layout(format!("tensor `{}` appears twice", e.name)).into()
                );
            }
            if e.shape.iter().product::<usize>() as u64 != e.len {
                return Err(CheckpointError::Layout(format!(
                    "tensor `{}`: shape {:?} does not match {} values",
                    e.name, e.shape, e.len
                ))
                .into());
            }
            if e.offset != expected_offset {
                return Err(CheckpointError::Layout(format!(
                    "tensor `{}` at offset {}, expected {expected_offset}",
                    e.name, e.offset
                ))
                .into());
            }
            let nbytes = (e.len as usize).checked_mul(4).ok_or_else(|| {
                CheckpointError::Layout(format!("tensor `{}` length overflows", e.name))
            })?;
            let start = e.offset as usize;
            let end = start.checked_add(nbytes).filter(|&end| end <= payload.len()).ok_or_else(
                || {
                    Error::from(CheckpointError::Truncated(format!(
                        "tensor `{}` needs bytes {start}..{} but the payload has {}",
                        e.name,
                        start + nbytes,
                        payload.len()
                    )))
                },
            )?;
            let slice = &payload[start..end];
            if fnv1a64(slice) != e.checksum {
                return Err(
                    CheckpointError::ChecksumMismatch { name: e.name.clone() }.into()
                );
            }
            let data = slice
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name: e.name.clone(), shape: e.shape.clone(), data });
            expected_offset += nbytes as u64;
        }
        if expected_offset != payload.len() as u64 {
            return Err(CheckpointError::Layout(format!(
                "payload has {} bytes but the header accounts for {expected_offset}",
                payload.len()
            ))
            .into());
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }

    /// FNV-1a fingerprint of the serialized bytes, for provenance fields.
    pub fn hash(&self) -> Result<u64> {
        Ok(fnv1a64(&self.to_bytes()?))
    }

    /// The fingerprint as 16 lowercase hex digits (JSON-safe).
    pub fn hash_hex(&self) -> Result<String> {
        Ok(format!("{:016x}", self.hash()?))
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
