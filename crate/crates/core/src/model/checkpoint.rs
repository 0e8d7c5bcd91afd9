//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "CDLCKPT\n"
//! version    u32 LE
//! header_len u64 LE
//! header     JSON: {version, kind, config, layout, step, optimizer_step_count}
//! sections   f32 LE values, layout.len() per section:
//!            weights [, exp_avg, exp_avg_sq]
//! ```
//!
//! Optimizer moments use the same layout table as the weights. Files are
//! content addressed: [`Checkpoint::content_id`] is the SHA-256 of the
//! encoded bytes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Layout, ModelConfig, WeightVector};
use crate::error::{Error, Result};
use crate::optimizer::OptimizerState;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CDLCKPT\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Weights,
    WeightsAndOptimizer,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    kind: CheckpointKind,
    config: ModelConfig,
    layout: Layout,
    step: u64,
    optimizer_step_count: Option<u64>,
}

/// Model weights, optionally with optimizer state, at a global step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Number of updates applied since initialisation.
    pub step: u64,
    pub weights: WeightVector<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, step: u64, weights: WeightVector<f32>, optimizer: Option<OptimizerState<f32>>) -> Self {
        Checkpoint {
            config,
            step,
            weights,
            optimizer,
        }
    }

    pub fn kind(&self) -> CheckpointKind {
        if self.optimizer.is_some() {
            CheckpointKind::WeightsAndOptimizer
        } else {
            CheckpointKind::Weights
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind(),
            config: self.config,
            layout: (**self.weights.layout()).clone(),
            step: self.step,
            optimizer_step_count: self.optimizer.as_ref().map(|o| o.step_count),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let sections = 1 + 2 * usize::from(self.optimizer.is_some());
        let mut out = Vec::with_capacity(20 + header.len() + sections * 4 * self.weights.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |v: &[f32]| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(self.weights.values());
        if let Some(o) = &self.optimizer {
            put(o.exp_avg.values());
            put(o.exp_avg_sq.values());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        header.config.validate()?;
        let layout = Layout::from_segments(header.layout.segments().to_vec())?;
        if layout != Layout::for_config(&header.config) {
            return Err(bad("layout table does not match model config"));
        }
        let layout = Arc::new(layout);
        let n = layout.len();
        let sections = match header.kind {
            CheckpointKind::Weights => 1,
            CheckpointKind::WeightsAndOptimizer => 3,
        };
        let data = &body[hlen..];
        if data.len() != sections * n * 4 {
            return Err(Error::Format(format!(
                "expected {} bytes of values, found {}",
                sections * n * 4,
                data.len()
            )));
        }
        let section = |i: usize| -> Vec<f32> {
            data[i * n * 4..(i + 1) * n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let weights = WeightVector::from_values(layout.clone(), section(0))?;
        let optimizer = match header.kind {
            CheckpointKind::Weights => None,
            CheckpointKind::WeightsAndOptimizer => Some(OptimizerState {
                exp_avg: WeightVector::from_values(layout.clone(), section(1))?,
                exp_avg_sq: WeightVector::from_values(layout, section(2))?,
                step_count: header
                    .optimizer_step_count
                    .ok_or_else(|| bad("optimizer section without step count"))?,
            }),
        };
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            weights,
            optimizer,
        })
    }

    /// SHA-256 of the encoded checkpoint, lowercase hex.
    pub fn content_id(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Write under `<dir>/<content id>.ckpt` and return `(id, path)`.
    pub fn store(&self, dir: &Path) -> Result<(String, PathBuf)> {
        let bytes = self.to_bytes();
        let id = hex::encode(Sha256::digest(&bytes));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{id}.ckpt"));
        if !path.exists() {
            let tmp = dir.join(format!(".{id}.tmp"));
            std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok((id, path))
    }

    /// Load `<dir>/<id>.ckpt`, verifying the content hash.
    pub fn load(dir: &Path, id: &str) -> Result<Self> {
        let path = dir.join(format!("{id}.ckpt"));
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let actual = hex::encode(Sha256::digest(&bytes));
        if actual != id {
            return Err(Error::Format(format!("content hash mismatch for {}", path.display())));
        }
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{adamw_step, OptimizerConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            ffw_dim: 12,
            head_dim: 4,
            n_heads: 2,
            vocab_size: 9,
            seq_len: 4,
        }
    }

    fn with_state() -> Checkpoint {
        let cfg = tiny();
        let mut w = WeightVector::<f32>::init(&cfg, 11);
        let g = WeightVector::<f32>::init(&cfg, 12);
        let mut st = OptimizerState::for_weights(&w);
        adamw_step(&mut w, &g, &mut st, 1e-3, &OptimizerConfig::default()).unwrap();
        Checkpoint::new(cfg, 7, w, Some(st))
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = with_state();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let bits = |w: &WeightVector<f32>| w.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.weights), bits(&ck.weights));
        let (a, b) = (back.optimizer.unwrap(), ck.optimizer.unwrap());
        assert_eq!(bits(&a.exp_avg_sq), bits(&b.exp_avg_sq));
        assert_eq!(a.step_count, 1);
    }

    #[test]
    fn weights_only() {
        let ck = Checkpoint::new(tiny(), 0, WeightVector::init(&tiny(), 1), None);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.kind(), CheckpointKind::Weights);
        assert_eq!(back, ck);
    }

    #[test]
    fn corrupted_inputs_rejected() {
        let bytes = with_state().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut ver = bytes;
        ver[8] = 9;
        assert!(Checkpoint::from_bytes(&ver).is_err());
    }

    #[test]
    fn content_addressed_store() {
        let dir = tempfile::tempdir().unwrap();
        let ck = with_state();
        let (id, path) = ck.store(dir.path()).unwrap();
        assert_eq!(id, ck.content_id());
        assert!(path.ends_with(format!("{id}.ckpt")));
        assert_eq!(Checkpoint::load(dir.path(), &id).unwrap(), ck);
        std::fs::write(&path, b"junk").unwrap();
        assert!(Checkpoint::load(dir.path(), &id).is_err());
    }
}
