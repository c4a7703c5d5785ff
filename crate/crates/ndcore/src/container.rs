//! Tensor container files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"NDTC"
//! version u32 (= 1)
//! mlen    u64            length of the manifest in bytes
//! manifest               UTF-8 JSON, see [`Manifest`]
//! payload                raw f32 values of every tensor, in manifest order
//! ```
//!
//! The manifest lists each tensor's name, shape, byte offset into the
//! payload and byte length, plus an arbitrary JSON `meta` object. Readers
//! reject files whose payload length differs from the manifest's total.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NdError, Result};
use crate::float::Float;
use crate::param::ParameterTree;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NDTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub dtype: String,
    pub endianness: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
}

/// Named f32 tensors plus metadata, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Tensor<f32>, Option<bool>)>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor, None));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| NdError::Corrupt(format!("tensor `{name}` missing")))?;
        Ok(self.tensors.remove(idx).1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t, trainable) in &self.tensors {
            let nbytes = t.len() * 4;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
                trainable: *trainable,
            });
            offset += nbytes;
        }
        let manifest = Manifest {
            dtype: "f32".into(),
            endianness: "little".into(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + mjson.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&mjson);
        for (_, t, _) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(NdError::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(NdError::Corrupt(format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mend = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| NdError::Corrupt("manifest length exceeds file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..mend])
            .map_err(|e| NdError::Corrupt(format!("manifest: {e}")))?;
        if manifest.dtype != "f32" || manifest.endianness != "little" {
            return Err(NdError::Corrupt(format!(
                "unsupported encoding {}/{}",
                manifest.dtype, manifest.endianness
            )));
        }
        let payload = &bytes[mend..];
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if e.shape.is_empty() || numel == 0 || e.nbytes != numel * 4 {
                return Err(NdError::Corrupt(format!(
                    "`{}`: shape {:?} needs {} bytes, manifest says {}",
                    e.name,
                    e.shape,
                    numel * 4,
                    e.nbytes
                )));
            }
            if e.offset != expected_offset {
                return Err(NdError::Corrupt(format!("`{}`: non-contiguous offset", e.name)));
            }
            expected_offset += e.nbytes;
            if expected_offset > payload.len() {
                return Err(NdError::Corrupt(format!(
                    "payload truncated: `{}` ends at byte {} of {}",
                    e.name,
                    expected_offset,
                    payload.len()
                )));
            }
            let data = payload[e.offset..e.offset + e.nbytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?, e.trainable));
        }
        if expected_offset != payload.len() {
            return Err(NdError::Corrupt(format!(
                "payload has {} bytes, manifest describes {}",
                payload.len(),
                expected_offset
            )));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl<F: Float> ParameterTree<F> {
    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        Container {
            tensors: self
                .iter()
                .map(|(n, p)| (n.to_string(), p.tensor.cast::<f32>(), Some(p.trainable)))
                .collect(),
            meta,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut tree = Self::new();
        for (name, t, trainable) in &c.tensors {
            tree.insert(name.clone(), t.cast(), trainable.unwrap_or(true))?;
        }
        Ok(tree)
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        self.to_container(meta).write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let c = Container::read(path)?;
        Ok((Self::from_container(&c)?, c.meta))
    }
}
