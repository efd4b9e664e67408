//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `SHAPELAT`, a little-endian `u64` header length,
//! a JSON header, then the raw little-endian array payload. The header lists
//! every array with its dtype, shape and byte offset, and carries a SHA-256
//! over the config and all arrays.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"SHAPELAT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => ArrayData::F64(flat.to_vec1()?),
            _ => ArrayData::F32(flat.to_dtype(DType::F32)?.to_vec1()?),
        };
        Ok(Array { shape: t.dims().to_vec(), data })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(match &self.data {
            ArrayData::F32(v) => Tensor::from_vec(v.clone(), self.shape.as_slice(), device)?,
            ArrayData::F64(v) => Tensor::from_vec(v.clone(), self.shape.as_slice(), device)?,
        })
    }

    fn dtype_name(&self) -> &'static str {
        match self.data {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match &self.data {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    schema: u32,
    stage: String,
    step: u64,
    seed: u64,
    config: serde_json::Value,
    meta: BTreeMap<String, serde_json::Value>,
    arrays: Vec<ArrayEntry>,
    hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Stage tag: `ae`, `vae` or `diffusion`.
    pub stage: String,
    pub step: u64,
    /// Seed the run was started with; step-indexed streams derive from it.
    pub seed: u64,
    pub config: serde_json::Value,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub arrays: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn new(stage: &str, step: u64, seed: u64, config: serde_json::Value) -> Self {
        Checkpoint {
            stage: stage.to_string(),
            step,
            seed,
            config,
            meta: BTreeMap::new(),
            arrays: BTreeMap::new(),
        }
    }

    /// Adds every parameter in `store` under `param.<name>`.
    pub fn add_params(&mut self, store: &ParamStore) -> Result<()> {
        for (name, var) in store.all() {
            self.arrays.insert(format!("param.{name}"), Array::from_tensor(var.as_tensor())?);
        }
        Ok(())
    }

    pub fn add_tensors(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in tensors {
            self.arrays.insert(format!("{prefix}.{name}"), Array::from_tensor(t)?);
        }
        Ok(())
    }

    /// Arrays under `prefix.`, with the prefix stripped.
    pub fn tensors(&self, prefix: &str, device: &Device) -> Result<BTreeMap<String, Tensor>> {
        let p = format!("{prefix}.");
        self.arrays
            .iter()
            .filter_map(|(n, a)| n.strip_prefix(&p).map(|s| (s.to_string(), a)))
            .map(|(n, a)| Ok((n, a.to_tensor(device)?)))
            .collect()
    }

    /// Writes `param.*` arrays into `store`, creating missing parameters.
    pub fn load_params(&self, store: &ParamStore) -> Result<()> {
        for (name, t) in self.tensors("param", store.device())? {
            store.insert(&name, &t)?;
        }
        Ok(())
    }

    /// SHA-256 over the config and every array (name, dtype, shape, bytes).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("json value serializes"));
        for (name, a) in &self.arrays {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update(a.dtype_name().as_bytes());
            for d in &a.shape {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(a.bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, a) in &self.arrays {
            let bytes = a.bytes();
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype: a.dtype_name().to_string(),
                shape: a.shape.clone(),
                offset: payload.len() as u64,
                nbytes: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            schema: SCHEMA_VERSION,
            stage: self.stage.clone(),
            step: self.step,
            seed: self.seed,
            config: self.config.clone(),
            meta: self.meta.clone(),
            arrays: entries,
            hash: self.hash(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        if header.schema != SCHEMA_VERSION {
            return Err(bad(&format!("unsupported schema {}", header.schema)));
        }
        let payload = &bytes[body..];
        let mut arrays = BTreeMap::new();
        for e in header.arrays {
            let start = e.offset as usize;
            let end = start.checked_add(e.nbytes as usize).filter(|&x| x <= payload.len()).ok_or_else(|| bad("truncated payload"))?;
            let raw = &payload[start..end];
            let count: usize = e.shape.iter().product();
            let data = match e.dtype.as_str() {
                "f32" if raw.len() == 4 * count => {
                    ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
                }
                "f64" if raw.len() == 8 * count => {
                    ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
                }
                _ => return Err(bad(&format!("array {} has inconsistent dtype or size", e.name))),
            };
            arrays.insert(e.name, Array { shape: e.shape, data });
        }
        let ckpt = Checkpoint {
            stage: header.stage,
            step: header.step,
            seed: header.seed,
            config: header.config,
            meta: header.meta,
            arrays,
        };
        if ckpt.hash() != header.hash {
            return Err(bad("content hash mismatch"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::error::write_file(path, self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_stage(&self, stage: &str) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Config(format!(
                "checkpoint holds stage `{}` but stage `{stage}` is required",
                self.stage
            )));
        }
        Ok(())
    }
}
