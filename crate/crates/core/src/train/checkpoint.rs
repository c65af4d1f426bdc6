//! Checkpoint files.
//!
//! Layout: the 8 magic bytes `PFCKPT01`, the JSON header length as a
//! little-endian `u64`, the UTF-8 JSON header, then little-endian `f64`
//! blocks: parameters, first moments, second moments (lengths given in the
//! header).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optimizer::{OptimizerKind, OptimizerState};
use super::MetricRow;
use crate::error::{Error, Result};
use crate::flows::{ArchSpec, FlowStack};

pub const MAGIC: &[u8; 8] = b"PFCKPT01";

/// Position in the shuffled data stream. The shuffle generator is derived
/// from `(seed, epoch)`, so this cursor is its complete state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DataCursor {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub params: Vec<f64>,
    pub optimizer_kind: OptimizerKind,
    pub optimizer: OptimizerState<f64>,
    pub step: u64,
    pub cursor: DataCursor,
    pub config_hash: String,
    pub history: Vec<MetricRow>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: ArchSpec,
    config_hash: String,
    step: u64,
    cursor: DataCursor,
    optimizer: OptimizerHeader,
    n_params: usize,
    history: Vec<MetricRow>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    kind: OptimizerKind,
    t: u64,
    skipped: u64,
    n_moments: usize,
}

impl Checkpoint {
    pub fn stack(&self) -> Result<FlowStack<f64>> {
        FlowStack::from_params(self.arch.clone(), &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            architecture: self.arch.clone(),
            config_hash: self.config_hash.clone(),
            step: self.step,
            cursor: self.cursor,
            optimizer: OptimizerHeader {
                kind: self.optimizer_kind,
                t: self.optimizer.t,
                skipped: self.optimizer.skipped,
                n_moments: self.optimizer.m.len(),
            },
            n_params: self.params.len(),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let floats = self.params.len() + 2 * self.optimizer.m.len();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.iter().chain(&self.optimizer.m).chain(&self.optimizer.s) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).filter(|b| b.len() >= hlen).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let floats = &body[hlen..];
        let n = header.n_params;
        let k = header.optimizer.n_moments;
        if floats.len() != 8 * (n + 2 * k) {
            return Err(Error::Format(format!("checkpoint holds {} float bytes, header implies {}", floats.len(), 8 * (n + 2 * k))));
        }
        let mut vals = floats.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let params: Vec<f64> = vals.by_ref().take(n).collect();
        let m: Vec<f64> = vals.by_ref().take(k).collect();
        let s: Vec<f64> = vals.collect();
        header.architecture.validate()?;
        Ok(Self {
            arch: header.architecture,
            params,
            optimizer_kind: header.optimizer.kind,
            optimizer: OptimizerState { t: header.optimizer.t, m, s, skipped: header.optimizer.skipped },
            step: header.step,
            cursor: header.cursor,
            config_hash: header.config_hash,
            history: header.history,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
