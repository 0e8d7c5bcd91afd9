//! A minimal decoder-only transformer: RMSNorm, rotary position
//! embeddings, SwiGLU feed-forward, untied embedding and output head.
//!
//! Parameters live in one flat [`WeightVector`] whose [`Layout`] names
//! each tensor's contiguous slice. The flat vector is the coordinate
//! system for souping, weight-space statistics and landscape directions.

mod checkpoint;
mod probe;
mod transformer;
mod weights;

pub use checkpoint::{Checkpoint, CheckpointKind, FORMAT_VERSION};
pub use probe::{train_probe, ProbeConfig, ProbeReport};
pub use transformer::{
    batch_loss, cross_entropy, forward, forward_with, gradients, gradients_scaled, hidden_states,
    hidden_states_normed, loss_and_gradients, row_losses, Logits,
};
pub use weights::{Layout, Segment, SegmentKind, WeightVector};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub ffw_dim: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    /// Desk-scale default: four layers of width 64 over a byte vocabulary.
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            ffw_dim: 192,
            head_dim: 16,
            n_heads: 4,
            vocab_size: 256,
            seq_len: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.d_model,
            self.n_layers,
            self.ffw_dim,
            self.head_dim,
            self.n_heads,
            self.vocab_size,
            self.seq_len,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!("all model dimensions must be positive: {self:?}")));
        }
        if self.d_model != self.head_dim * self.n_heads {
            return Err(Error::Config(format!(
                "d_model {} != head_dim {} * n_heads {}",
                self.d_model, self.head_dim, self.n_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config("rotary embeddings need an even head_dim".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 3 * d * self.ffw_dim;
        2 * self.vocab_size * d + self.n_layers * per_layer + d
    }
}

/// Token ids, `rows × (seq_len + 1)`. Inputs are the first `seq_len`
/// columns, targets the same row shifted left by one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    rows: usize,
    width: usize,
    tokens: Vec<u32>,
}

impl Batch {
    pub fn new(rows: usize, seq_len: usize, tokens: Vec<u32>) -> Result<Self> {
        let width = seq_len + 1;
        if tokens.len() != rows * width {
            return Err(Error::Shape(format!(
                "batch of {rows} rows x {width} needs {} tokens, got {}",
                rows * width,
                tokens.len()
            )));
        }
        Ok(Batch { rows, width, tokens })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let width = rows.first().map(|r| r.len()).unwrap_or(0);
        if width < 2 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("rows must share a length of at least 2".into()));
        }
        Batch::new(rows.len(), width - 1, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn seq_len(&self) -> usize {
        self.width - 1
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.tokens[r * self.width..(r + 1) * self.width]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn inputs(&self, r: usize) -> &[u32] {
        &self.row(r)[..self.width - 1]
    }

    pub fn targets(&self, r: usize) -> &[u32] {
        &self.row(r)[1..]
    }

    /// Check shape and vocabulary against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.rows == 0 {
            return Err(Error::Empty("batch has no rows".into()));
        }
        if self.seq_len() > config.seq_len {
            return Err(Error::Shape(format!(
                "batch seq_len {} exceeds model seq_len {}",
                self.seq_len(),
                config.seq_len
            )));
        }
        if let Some(&id) = self.tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: config.vocab_size,
            });
        }
        Ok(())
    }

    /// A batch with the same rows in a different order.
    pub fn permute_rows(&self, order: &[usize]) -> Batch {
        let tokens = order.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Batch {
            rows: order.len(),
            width: self.width,
            tokens,
        }
    }
}
