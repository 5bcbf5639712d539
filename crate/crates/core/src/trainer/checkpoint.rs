//! Checkpoint layout: magic `TPOC`, little-endian `u32` version and JSON
//! header length, the JSON header, then every parameter's `f32` data in
//! header order, then all first moments, then all second moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::OptimState;
use super::TrainConfig;
use crate::autodiff::{ParameterStore, Tensor};
use crate::diffusion::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TPOC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// The per-step generator is derived from `(seed, step)`, so this pair is
/// the complete random state of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub train: TrainConfig,
    pub model: DenoiserConfig,
    pub t_max: usize,
    pub params: Vec<ParamEntry>,
    pub rng: RngState,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterStore<f32>,
    pub optim: OptimState,
}

impl Checkpoint {
    pub fn new(train: TrainConfig, denoiser: &Denoiser, optim: OptimState, rng: RngState) -> Self {
        let params = denoiser
            .params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                train,
                model: denoiser.config.clone(),
                t_max: denoiser.t_max,
                params,
                rng,
                step: optim.step,
            },
            params: denoiser.params.clone(),
            optim,
        }
    }

    pub fn denoiser(&self) -> Denoiser {
        Denoiser {
            config: self.header.model.clone(),
            t_max: self.header.t_max,
            params: self.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + json.len() + self.params.num_scalars() * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let push = |out: &mut Vec<u8>, data: &[f32]| {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for e in &self.header.params {
            let p = self
                .params
                .get(&e.name)
                .ok_or_else(|| Error::InvalidArgument(format!("header names missing parameter {:?}", e.name)))?;
            push(&mut out, p.data());
        }
        for moments in [&self.optim.m, &self.optim.v] {
            for e in &self.header.params {
                let m = moments
                    .get(&e.name)
                    .ok_or_else(|| Error::InvalidArgument(format!("no optimizer moments for {:?}", e.name)))?;
                push(&mut out, m);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |offset: usize, reason: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason,
        };
        let u32_at = |off: usize| -> Result<u32> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| err(bytes.len(), "truncated header".into()))
        };
        if bytes.get(0..4) != Some(MAGIC.as_slice()) {
            return Err(err(0, "bad magic, expected TPOC".into()));
        }
        let version = u32_at(4)?;
        if version != CHECKPOINT_VERSION {
            return Err(err(
                4,
                format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let len = u32_at(8)? as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| err(bytes.len(), format!("truncated JSON header of {len} bytes")))?;
        let header: CheckpointHeader = serde_json::from_slice(json)
            .map_err(|e| err(12 + e.column().saturating_sub(1), format!("bad JSON header: {e}")))?;
        let sizes: Vec<usize> = header.params.iter().map(|e| e.shape.iter().product()).collect();
        let total: usize = sizes.iter().sum();
        let mut offset = 12 + len;
        let expected = offset + 3 * total * 4;
        if bytes.len() != expected {
            return Err(err(
                bytes.len().min(expected),
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let mut read = |n: usize| -> Vec<f32> {
            let v = bytes[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            offset += 4 * n;
            v
        };
        let mut params = ParameterStore::new();
        for (e, &n) in header.params.iter().zip(&sizes) {
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), read(n))?)?;
        }
        let mut optim = OptimState {
            step: header.step,
            ..OptimState::default()
        };
        for e in header.params.iter().zip(&sizes) {
            optim.m.insert(e.0.name.clone(), read(*e.1));
        }
        for e in header.params.iter().zip(&sizes) {
            optim.v.insert(e.0.name.clone(), read(*e.1));
        }
        Ok(Self { header, params, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
