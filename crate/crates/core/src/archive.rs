//! Single-file container of named `f64` tensors plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "DEGNTAR\0"
//! version  u32       FORMAT_VERSION
//! hlen     u64       length of the JSON header
//! header   hlen      {"metadata": …, "tensors": [{name, shape, offset, len, sha256}]}
//! payload  …         every tensor's values as f64, in header order
//! ```
//!
//! Each tensor carries a SHA-256 of its payload bytes so corruption is
//! reported against the key it hit. Writes go to a temporary sibling file
//! that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DEGNTAR\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn integrity(path: &Path, message: impl Into<String>) -> Error {
    Error::Integrity {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Archive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Removes and returns `name`, or an integrity error naming the key.
    pub fn take(&mut self, name: &str, path: &Path) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| integrity(path, format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let bytes = tensor_bytes(t);
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                len: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Writes atomically: temporary sibling, fsync, rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = tmp_path(path);
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
            f.write_all(&bytes)
                .and_then(|_| f.sync_all())
                .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming into {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parses and verifies an archive; `path` is only used in diagnostics.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(integrity(path, "not a tensor archive (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(integrity(path, format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| integrity(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| integrity(path, format!("malformed header: {e}")))?;
        let payload = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let start = e.offset as usize;
            let end = start
                .checked_add(e.len as usize)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| integrity(path, format!("tensor `{}` is truncated", e.name)))?;
            let raw = &payload[start..end];
            if hex::encode(Sha256::digest(raw)) != e.sha256 {
                return Err(integrity(path, format!("checksum mismatch for tensor `{}`", e.name)));
            }
            if raw.len() % 8 != 0 {
                return Err(integrity(path, format!("tensor `{}` has a partial value", e.name)));
            }
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data)
                .map_err(|err| integrity(path, format!("tensor `{}`: {err}", e.name)))?;
            tensors.insert(e.name, t);
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
