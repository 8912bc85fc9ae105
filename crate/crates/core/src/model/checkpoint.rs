//! Checkpoint container.
//!
//! Layout: `b"D2VCKPT\0"`, format version (u32 LE), header length (u64 LE),
//! JSON header, then the raw little-endian tensor data. The header carries
//! the network spec, the init seed, the dtype, an index of
//! `(name, shape, offset)` entries and free-form metadata.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::net::Domain2VecNet;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"D2VCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    init_seed: u64,
    dtype: String,
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

/// Decoded checkpoint: model tensors, any extra named tensors and metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub init_seed: u64,
    pub dtype: DType,
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: serde_json::Value,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Config(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

impl Checkpoint {
    /// Captures the model plus `extra` tensors (e.g. optimizer moments).
    pub fn capture(net: &Domain2VecNet, extra: BTreeMap<String, Tensor>, meta: serde_json::Value) -> Result<Self> {
        let mut tensors = net.store().snapshot()?;
        for (k, v) in extra {
            if tensors.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("extra tensor {k} shadows a model tensor")));
            }
        }
        Ok(Self {
            spec: net.spec().clone(),
            init_seed: net.store().init_seed(),
            dtype: net.dtype(),
            tensors,
            meta,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.dims().to_vec(),
                offset: data.len(),
            });
            let flat = t.to_dtype(self.dtype)?.flatten_all()?;
            match self.dtype {
                DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
                _ => flat.to_vec1::<f64>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let header = Header {
            spec: self.spec.clone(),
            init_seed: self.init_seed,
            dtype: dtype_name(self.dtype)?.to_string(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        let data = &bytes[20 + hlen..];
        let (dtype, width) = match header.dtype.as_str() {
            "f32" => (DType::F32, 4),
            "f64" => (DType::F64, 8),
            d => return Err(bad(format!("unknown dtype {d}"))),
        };
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(e.offset..e.offset + n * width)
                .ok_or_else(|| bad(format!("tensor {} out of bounds", e.name)))?;
            let t = if dtype == DType::F32 {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            } else {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            };
            tensors.insert(e.name.clone(), t);
        }
        Ok(Self {
            spec: header.spec,
            init_seed: header.init_seed,
            dtype,
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    /// Rebuilds the network and copies every stored model tensor into it.
    pub fn to_net(&self) -> Result<Domain2VecNet> {
        let net = Domain2VecNet::new(&self.spec, self.init_seed, self.dtype)?;
        let names: Vec<String> = net.store().named_tensors().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Lookup(format!("checkpoint lacks tensor {name}")))?;
            net.store().set(&name, t)?;
        }
        Ok(net)
    }

    /// Tensors not belonging to the model, keyed by name.
    pub fn extra(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}
