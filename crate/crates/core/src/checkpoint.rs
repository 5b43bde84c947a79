//! Single-file binary checkpoints.
//!
//! Layout: the 8-byte tag `FCAPCKPT`, a little-endian `u32` format version, a `u32`
//! element width (4 or 8), a `u64` metadata length, UTF-8 JSON metadata, then raw
//! little-endian tensor data in metadata order: model tensors, then Adam first moments,
//! then Adam second moments.
//!
//! Shuffling is derived from `(seed, epoch)`, so the seed and epoch fully capture the
//! random state needed to resume.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::real::Real;
use crate::tensor::Tensor;

const TAG: &[u8; 8] = b"FCAPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: serde_json::Value,
    training: serde_json::Value,
    seed: u64,
    epoch: usize,
    best_test_epe: Option<f64>,
    adam: Option<AdamConfig>,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
    moments: usize,
}

/// Model tensors, optimizer state and bookkeeping needed to resume or reuse a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// Model description (architecture config), opaque to this module.
    pub model: serde_json::Value,
    /// Training settings echo.
    pub training: serde_json::Value,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub best_test_epe: Option<f64>,
    pub state: Vec<(String, Tensor<T>)>,
    pub adam: Option<AdamState<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let moments = self.adam.as_ref().map_or(0, |a| a.m.len());
        let meta = Meta {
            model: self.model.clone(),
            training: self.training.clone(),
            seed: self.seed,
            epoch: self.epoch,
            best_test_epe: self.best_test_epe,
            adam: self.adam.as_ref().map(|a| a.config),
            adam_step: self.adam.as_ref().map_or(0, |a| a.step),
            tensors: self
                .state
                .iter()
                .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
            moments,
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(TAG);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |t: &Tensor<T>| t.data().iter().for_each(|&x| x.write_le(&mut out));
        self.state.iter().for_each(|(_, t)| push(t));
        if let Some(a) = &self.adam {
            a.m.iter().chain(&a.v).for_each(&mut push);
        }
        out
    }

    /// Decodes a checkpoint written in either precision, converting values to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != TAG {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("checkpoint format {version} is not supported (expected {FORMAT_VERSION})")));
        }
        let width = u32_at(12) as usize;
        let json_len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let body = 24usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Length { expected: 24 + json_len, found: bytes.len() })?;
        let meta: Meta = serde_json::from_slice(&bytes[24..body]).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let mut pos = body;
        let moment_shapes: Vec<Vec<usize>> = meta.tensors.iter().take(meta.moments).map(|t| t.shape.clone()).collect();
        let total: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>()
            + 2 * moment_shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>();
        let expected = body + total * width;
        if bytes.len() != expected {
            return Err(Error::Length { expected, found: bytes.len() });
        }
        let mut read = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let chunk = &bytes[pos..pos + n * width];
            pos += n * width;
            let data: Vec<T> = match width {
                4 => chunk.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
                8 => chunk.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
                w => return Err(Error::Format(format!("unsupported element width {w}"))),
            };
            Tensor::new(shape, data)
        };
        let state = meta
            .tensors
            .iter()
            .map(|e| Ok((e.name.clone(), read(&e.shape)?)))
            .collect::<Result<Vec<_>>>()?;
        let adam = match meta.adam {
            Some(config) => {
                let m = moment_shapes.iter().map(|s| read(s)).collect::<Result<Vec<_>>>()?;
                let v = moment_shapes.iter().map(|s| read(s)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { config, step: meta.adam_step, m, v })
            }
            None => None,
        };
        Ok(Self {
            model: meta.model,
            training: meta.training,
            seed: meta.seed,
            epoch: meta.epoch,
            best_test_epe: meta.best_test_epe,
            state,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Load { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Decodes the model description.
    pub fn model_as<M: serde::de::DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.model.clone()).map_err(|e| Error::Format(format!("checkpoint model description: {e}")))
    }
}
