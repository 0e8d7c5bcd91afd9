//! Row types of the CSV reports and their (de)serialization.
//!
//! Floats are written in shortest round-trip form, so parsing a report back
//! yields exactly the values that were computed.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().context("flushing csv")?)
}

pub fn parse_csv<T: DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .map(|r| r.context("parsing csv row"))
        .collect()
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_csv(&bytes).with_context(|| format!("in {}", path.display()))
}

/// One shape in one bias-variance space. `residual` is only defined in
/// loss space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceRow {
    pub shape: String,
    pub alpha: f64,
    pub bias: f64,
    pub variance: f64,
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub shape: String,
    pub alpha: f64,
    pub shift: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub seed: u64,
    pub cooldown_loss: f64,
    pub constant_loss: f64,
    /// `constant_loss - cooldown_loss`.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoupRow {
    pub shape: String,
    pub alpha: f64,
    pub member_mean_loss: f64,
    pub soup_loss: f64,
    pub long_run_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSweepRow {
    pub k: u64,
    pub seed: u64,
    pub steps: u64,
    /// Whether `cooldown_steps / k` was rounded down.
    pub rounded: bool,
    pub tokens: u64,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub final_val_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSweepRow {
    pub p: f64,
    pub vary: String,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub final_val_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub checkpoint: String,
    pub step: u64,
    pub layer: usize,
    pub probe_step: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub shape: String,
    pub alpha: f64,
    pub step: u64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_perplexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub step: u64,
    pub grad_norm: f64,
    pub alignment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetroRow {
    pub batch_index: usize,
    pub pre_perplexity: f64,
    pub post_perplexity: f64,
}
