//! Self-describing parameter container.
//!
//! Layout: the 8-byte magic `MCETMCKP`, a little-endian `u32` format
//! version, a little-endian `u64` manifest length, the JSON manifest, then
//! every array as contiguous little-endian `f32` in manifest order. A single
//! file can hold several named networks plus free-form metadata.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndgrad::{Activation, Mlp};

const MAGIC: &[u8; 8] = b"MCETMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated data section")]
    Truncated,
    #[error("missing entry `{0}`")]
    Missing(String),
    #[error("entry `{name}`: {reason}")]
    Invalid { name: String, reason: String },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct EntryInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Manifest {
    format_version: u32,
    dtype: String,
    meta: BTreeMap<String, String>,
    entries: Vec<EntryInfo>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: BTreeMap<String, String>,
    arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn insert_array(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let values = data.iter().map(|&v| v as f32).collect();
        self.arrays.insert(name.into(), (shape.to_vec(), values));
    }

    pub fn array(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>), CheckpointError> {
        let (shape, data) = self
            .arrays
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        Ok((shape.clone(), data.iter().map(|&v| v as f64).collect()))
    }

    pub fn insert_mlp(&mut self, prefix: &str, net: &Mlp) {
        self.set_meta(format!("{prefix}.activation"), net.activation().name());
        self.set_meta(format!("{prefix}.layers"), net.n_layers().to_string());
        for (k, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
            self.insert_array(format!("{prefix}.w{k}"), &[w.nrows(), w.ncols()], w.as_slice().unwrap());
            self.insert_array(format!("{prefix}.b{k}"), &[b.len()], b.as_slice().unwrap());
        }
    }

    pub fn mlp(&self, prefix: &str) -> Result<Mlp, CheckpointError> {
        let invalid = |reason: &str| CheckpointError::Invalid {
            name: prefix.to_string(),
            reason: reason.to_string(),
        };
        let act = self
            .meta(&format!("{prefix}.activation"))
            .and_then(Activation::from_name)
            .ok_or_else(|| invalid("activation"))?;
        let layers: usize = self
            .meta(&format!("{prefix}.layers"))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| invalid("layer count"))?;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for k in 0..layers {
            let (ws, wd) = self.array(&format!("{prefix}.w{k}"))?;
            let (bs, bd) = self.array(&format!("{prefix}.b{k}"))?;
            if ws.len() != 2 || bs.len() != 1 {
                return Err(invalid("rank"));
            }
            weights.push(Array2::from_shape_vec((ws[0], ws[1]), wd).map_err(|e| invalid(&e.to_string()))?);
            biases.push(Array1::from(bd));
        }
        Mlp::from_parts(weights, biases, act).map_err(|e| invalid(&e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: "float32-le".into(),
            meta: self.meta.clone(),
            entries: self
                .arrays
                .iter()
                .map(|(name, (shape, _))| EntryInfo {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in self.arrays.values() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + len).ok_or(CheckpointError::Truncated)?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let mut offset = 20 + len;
        let mut arrays = BTreeMap::new();
        for entry in manifest.entries {
            let n: usize = entry.shape.iter().product();
            let raw = bytes.get(offset..offset + 4 * n).ok_or(CheckpointError::Truncated)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 4 * n;
            arrays.insert(entry.name, (entry.shape, data));
        }
        Ok(Self {
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
