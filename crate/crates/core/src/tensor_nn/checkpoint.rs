//! Checkpoint directories: `manifest.json` describing every tensor plus a
//! little-endian blob `tensors.bin` whose SHA-256 the manifest records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
}

impl CheckpointEntry {
    fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    blob_sha256: String,
    entries: Vec<CheckpointEntry>,
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Default)]
pub struct CheckpointWriter {
    entries: Vec<CheckpointEntry>,
    blob: Vec<u8>,
    meta: BTreeMap<String, serde_json::Value>,
}

impl CheckpointWriter {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, shape: &[usize], dtype: Dtype) {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate checkpoint entry {name}"
        );
        self.entries.push(CheckpointEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype,
            offset: self.blob.len() as u64,
        });
    }

    /// Store as float32 (values are rounded).
    pub fn add_f32(&mut self, name: &str, t: &Tensor) {
        self.push(name, t.shape(), Dtype::F32);
        for &v in t.data() {
            self.blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn add_f64(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(name, shape, Dtype::F64);
        for &v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.meta.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Write the directory, replacing files atomically by rename.
    pub fn write(self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            version: FORMAT_VERSION,
            blob_sha256: hex_sha256(&self.blob),
            entries: self.entries,
            meta: self.meta,
        };
        let tmp_blob = dir.join(format!("{BLOB_FILE}.tmp"));
        let tmp_manifest = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp_blob, &self.blob)?;
        fs::write(&tmp_manifest, serde_json::to_vec_pretty(&manifest)?)?;
        fs::rename(tmp_blob, dir.join(BLOB_FILE))?;
        fs::rename(tmp_manifest, dir.join(MANIFEST_FILE))?;
        Ok(())
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A verified checkpoint held in memory.
#[derive(Debug)]
pub struct Checkpoint {
    entries: Vec<CheckpointEntry>,
    blob: Vec<u8>,
    meta: BTreeMap<String, serde_json::Value>,
    blob_sha256: String,
}

impl Checkpoint {
    /// Load and verify the blob hash and entry bounds.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
            .map_err(|e| Error::Integrity(format!("unreadable manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "unknown checkpoint version {}",
                manifest.version
            )));
        }
        let blob = fs::read(dir.join(BLOB_FILE))?;
        let digest = hex_sha256(&blob);
        if digest != manifest.blob_sha256 {
            return Err(Error::Integrity(format!(
                "tensor blob hash {digest} does not match manifest {}",
                manifest.blob_sha256
            )));
        }
        for e in &manifest.entries {
            if e.offset as usize + e.byte_len() > blob.len() {
                return Err(Error::Integrity(format!("entry {} exceeds the blob", e.name)));
            }
        }
        Ok(Self {
            entries: manifest.entries,
            blob,
            meta: manifest.meta,
            blob_sha256: manifest.blob_sha256,
        })
    }

    pub fn entries(&self) -> &[CheckpointEntry] {
        &self.entries
    }

    pub fn blob_sha256(&self) -> &str {
        &self.blob_sha256
    }

    fn entry(&self, name: &str) -> Result<&CheckpointEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint has no entry {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    /// Read an entry of either dtype as an `f64` tensor.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.entry(name)?;
        let bytes = &self.blob[e.offset as usize..e.offset as usize + e.byte_len()];
        let data = match e.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(Tensor::new(e.shape.clone(), data))
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Integrity(format!("checkpoint has no metadata {key}")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Integrity(format!("metadata {key}: {e}")))
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.meta.contains_key(key)
    }
}
