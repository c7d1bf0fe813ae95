// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `ICLM` container: magic, format version, a length-prefixed JSON header
//! and raw little-endian `f32` payloads.
//!
//! ```text
//! "ICLM" | u32 version | u64 header_len | header JSON | payload bytes
//! ```
//!
//! Header tensor offsets are relative to the first payload byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"ICLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Model,
    Lora,
    Gates,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: ArtifactKind,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form metadata, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ArtifactKind,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(kind: ArtifactKind, meta: serde_json::Value) -> Self {
        Self {
            kind,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                offset: 0,
                detail: format!("missing tensor {name:?}"),
            })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let len = (t.len() * 4) as u64;
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len,
                };
                offset += len;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |at: usize, n: usize, what: &str| -> Result<&[u8]> {
            bytes.get(at..at + n).ok_or_else(|| Error::Format {
                offset: bytes.len() as u64,
                detail: format!("truncated {what}: need bytes {at}..{}", at + n),
            })
        };
        if take(0, 4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad magic".into(),
            });
        }
        let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let header_len = u64::from_le_bytes(take(8, 8, "header length")?.try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len).map_err(|_| Error::Format {
            offset: 8,
            detail: "header length overflows".into(),
        })?;
        let header: Header =
            serde_json::from_slice(take(16, header_len, "header")?).map_err(|e| Error::Format {
                offset: 16,
                detail: format!("header JSON: {e}"),
            })?;
        let base = 16 + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count: usize = e.shape.iter().product();
            if e.len != (count * 4) as u64 {
                return Err(Error::Format {
                    offset: 16,
                    detail: format!("tensor {:?}: {} bytes for shape {:?}", e.name, e.len, e.shape),
                });
            }
            let at = base + e.offset as usize;
            let raw = take(at, e.len as usize, &format!("tensor {:?}", e.name))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
