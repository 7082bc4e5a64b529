//! Checkpoint container: `IIDCKPT1`, a little-endian `u64` header length,
//! a JSON header, then a flat payload of little-endian `f32`.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"IIDCKPT1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("I/O failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed checkpoint {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("checkpoint has no {kind:?} entry for {name}")]
    Missing { name: String, kind: EntryKind },
    #[error("entry {name}: stored {stored} values, expected {expected}")]
    SizeMismatch { name: String, stored: usize, expected: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    AdamM,
    AdamV,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Free-form description of whatever produced the tensors.
    pub meta: serde_json::Value,
    pub step: u64,
    pub entries: Vec<CheckpointEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    payload: Vec<f32>,
    index: HashMap<(String, EntryKind), usize>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value, step: u64) -> Self {
        Self {
            header: CheckpointHeader { meta, step, entries: Vec::new() },
            payload: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: &str, kind: EntryKind, shape: &[usize], values: impl IntoIterator<Item = f32>) {
        let offset = self.payload.len();
        self.payload.extend(values);
        let len = self.payload.len() - offset;
        assert_eq!(len, shape.iter().product::<usize>(), "entry {name} does not match its shape");
        self.index.insert((name.to_string(), kind), self.header.entries.len());
        self.header.entries.push(CheckpointEntry { name: name.into(), kind, shape: shape.to_vec(), offset, len });
    }

    pub fn get(&self, name: &str, kind: EntryKind) -> Result<&[f32], CheckpointError> {
        let &i = self
            .index
            .get(&(name.to_string(), kind))
            .ok_or_else(|| CheckpointError::Missing { name: name.into(), kind })?;
        let e = &self.header.entries[i];
        Ok(&self.payload[e.offset..e.offset + e.len])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.payload.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.into(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
        Self::from_bytes(&bytes).map_err(|detail| CheckpointError::Format { path: path.into(), detail })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err("bad magic".into());
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or("truncated header")?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| e.to_string())?;
        let raw = &bytes[16 + hlen..];
        if raw.len() % 4 != 0 {
            return Err("payload is not a whole number of f32".into());
        }
        let payload: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut index = HashMap::new();
        for (i, e) in header.entries.iter().enumerate() {
            if e.offset + e.len > payload.len() || e.len != e.shape.iter().product::<usize>() {
                return Err(format!("entry {} out of bounds", e.name));
            }
            index.insert((e.name.clone(), e.kind), i);
        }
        Ok(Self { header, payload, index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = Checkpoint::new(serde_json::json!({"arch": "x"}), 7);
        c.push("conv.w", EntryKind::Param, &[2, 1, 1, 1], [1.5, -2.0]);
        c.push("conv.w", EntryKind::AdamM, &[2, 1, 1, 1], [0.1, 0.2]);
        c.push("bn.mean", EntryKind::Buffer, &[3], [0.0, 1.0, 2.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("conv.w", EntryKind::AdamM).unwrap(), &[0.1, 0.2]);
        assert!(matches!(back.get("conv.w", EntryKind::AdamV), Err(CheckpointError::Missing { .. })));

        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[bytes.len() - 4..], &2.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut c = Checkpoint::new(serde_json::Value::Null, 0);
        c.push("a", EntryKind::Param, &[2], [1.0, 2.0]);
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
