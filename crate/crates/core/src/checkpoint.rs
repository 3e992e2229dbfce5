//! Binary checkpoints: magic, a JSON header, then little-endian tensor data
//! in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RCTNCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    iteration: usize,
    optimizer_step: u64,
    best_f1: Option<f64>,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

/// Model parameters and buffers, optimizer moments and training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub iteration: usize,
    pub optimizer_step: u64,
    pub best_f1: Option<f64>,
    pub config_hash: String,
    pub tensors: Vec<(TensorEntry, Tensor<T>)>,
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensors_of(&self, kind: TensorKind) -> impl Iterator<Item = &(TensorEntry, Tensor<T>)> {
        self.tensors.iter().filter(move |(e, _)| e.kind == kind)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            model: self.model.clone(),
            iteration: self.iteration,
            optimizer_step: self.optimizer_step,
            best_f1: self.best_f1,
            config_hash: self.config_hash.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let numel: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + numel * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (e, t) in &self.tensors {
            if e.shape != t.shape() {
                return Err(Error::Checkpoint(format!("{}: entry shape {:?} differs from tensor {:?}", e.name, e.shape, t.shape())));
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {} values, expected {}", header.dtype, T::DTYPE)));
        }
        let mut rest = &bytes[20 + len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let size = n * T::BYTES;
            if rest.len() < size {
                return Err(Error::Checkpoint(format!("truncated data for {}", e.name)));
            }
            let data = rest[..size].chunks_exact(T::BYTES).map(T::read_le).collect();
            rest = &rest[size..];
            let t = Tensor::new(&e.shape, data)?;
            tensors.push((e, t));
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            model: header.model,
            iteration: header.iteration,
            optimizer_step: header.optimizer_step,
            best_f1: header.best_f1,
            config_hash: header.config_hash,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // write-then-rename so a crash never leaves a torn file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile { path: path.into() },
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes)
    }
}
