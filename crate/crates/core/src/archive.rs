//! Minimal reader/writer for the safetensors container (f32 only):
//! `u64` little-endian header length, JSON header, then raw little-endian data.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::{PddError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, ArchiveTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.tensors.insert(name.into(), ArchiveTensor { shape: shape.to_vec(), data });
    }

    pub fn get(&self, name: &str) -> Result<&ArchiveTensor> {
        self.tensors.get(name).ok_or_else(|| PddError::Data(format!("archive has no tensor `{name}`")))
    }

    /// Serializes with tensors in name order, so equal archives give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            header.insert("__metadata__".into(), json!(self.metadata));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.data.len() * 4;
            header.insert(
                name.clone(),
                json!({ "dtype": "F32", "shape": t.shape, "data_offsets": [offset, offset + len] }),
            );
            offset += len;
        }
        let mut head = Value::Object(header).to_string().into_bytes();
        while head.len() % 8 != 0 {
            head.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + head.len() + offset);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| PddError::Integrity(format!("tensor archive: {m}"));
        if bytes.len() < 8 {
            return Err(corrupt("truncated header length"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body_start = 8usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("header overruns file"))?;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..body_start]).map_err(|e| corrupt(&e.to_string()))?;
        let body = &bytes[body_start..];
        let mut archive = Archive::default();
        for (name, entry) in header {
            if name == "__metadata__" {
                archive.metadata = serde_json::from_value(entry).map_err(|e| corrupt(&e.to_string()))?;
                continue;
            }
            if entry.get("dtype").and_then(Value::as_str) != Some("F32") {
                return Err(corrupt(&format!("`{name}` is not F32")));
            }
            let shape: Vec<usize> = entry
                .get("shape")
                .and_then(|s| serde_json::from_value(s.clone()).ok())
                .ok_or_else(|| corrupt(&format!("`{name}` has no shape")))?;
            let offs: [usize; 2] = entry
                .get("data_offsets")
                .and_then(|s| serde_json::from_value(s.clone()).ok())
                .ok_or_else(|| corrupt(&format!("`{name}` has no offsets")))?;
            let numel: usize = shape.iter().product();
            if offs[0] > offs[1] || offs[1] > body.len() || offs[1] - offs[0] != numel * 4 {
                return Err(corrupt(&format!("`{name}` offsets {offs:?} inconsistent")));
            }
            let data = body[offs[0]..offs[1]]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            archive.tensors.insert(name, ArchiveTensor { shape, data });
        }
        Ok(archive)
    }
}
