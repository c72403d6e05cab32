//! Named-tensor checkpoint container: a length-prefixed JSON header (tensor
//! names, shapes, dtype, step, tokens_seen) followed by raw little-endian
//! tensor payloads in header order. Serialization is byte-deterministic so
//! seeded reruns can be compared by hashing checkpoint files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, Parameters};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io failed for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not fit the model config: {0}")]
    Incompatible(String),
}

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

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: Dtype,
    step: u64,
    tokens_seen: u64,
    tensors: Vec<TensorMeta>,
}

const VERSION: u32 = 1;

/// A model snapshot: parameter tensors plus the step and token counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tokens_seen: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(params: &Parameters, step: u64, tokens_seen: u64) -> Checkpoint {
        Checkpoint {
            step,
            tokens_seen,
            tensors: params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Rebuilds Parameters for `cfg`, checking that names and shapes agree.
    pub fn to_params(&self, cfg: &ModelConfig) -> Result<Parameters, CheckpointError> {
        let mut params = Parameters::zeros(cfg);
        let slots = params.named_mut();
        if slots.len() != self.tensors.len() {
            return Err(CheckpointError::Incompatible(format!(
                "config expects {} tensors, checkpoint has {}",
                slots.len(),
                self.tensors.len()
            )));
        }
        for ((want_name, slot), (name, tensor)) in slots.into_iter().zip(&self.tensors) {
            if want_name != *name {
                return Err(CheckpointError::Incompatible(format!(
                    "tensor {name} found where {want_name} expected"
                )));
            }
            if slot.shape() != tensor.shape() {
                return Err(CheckpointError::Incompatible(format!(
                    "tensor {name} has shape {:?}, config expects {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(params)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let header = Header {
            version: VERSION,
            dtype,
            step: self.step,
            tokens_seen: self.tokens_seen,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorMeta {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self
            .tensors
            .iter()
            .map(|(_, t)| t.len() * dtype.size())
            .sum();
        let mut out = Vec::with_capacity(8 + header_json.len() + payload);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, tensor) in &self.tensors {
            match dtype {
                Dtype::F64 => {
                    for &x in tensor.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Dtype::F32 => {
                    for &x in tensor.data() {
                        out.extend_from_slice(&(x as f32).to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Malformed("too short for header".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let rest = &bytes[8..];
        if rest.len() < header_len {
            return Err(CheckpointError::Malformed("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| CheckpointError::Malformed(format!("bad header json: {e}")))?;
        if header.version != VERSION {
            return Err(CheckpointError::Malformed(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let mut cursor = &rest[header_len..];
        let elem = header.dtype.size();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let count: usize = meta.shape.iter().product();
            let need = count * elem;
            if cursor.len() < need {
                return Err(CheckpointError::Malformed(format!(
                    "truncated payload for tensor {}",
                    meta.name
                )));
            }
            let data: Vec<f64> = match header.dtype {
                Dtype::F64 => cursor[..need]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => cursor[..need]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            cursor = &cursor[need..];
            tensors.push((meta.name.clone(), Tensor::from_vec(&meta.shape, data)));
        }
        if !cursor.is_empty() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes after payloads",
                cursor.len()
            )));
        }
        Ok(Checkpoint {
            step: header.step,
            tokens_seen: header.tokens_seen,
            tensors,
        })
    }

    pub fn write(&self, path: &Path, dtype: Dtype) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes(dtype)).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}
