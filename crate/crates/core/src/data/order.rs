//! Seeded batch orders.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`)
//! driving the Fisher-Yates shuffle of `rand::seq::SliceRandom`. The
//! generator identity is part of the reproducibility contract: the same
//! `(seed, n)` always yields the same order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::Result;
use crate::exec::Exec;
use crate::model::{batch_loss, ModelConfig, WeightVector};

/// A visitation order over `n_batches` batch indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seq_len: usize,
    pub order: Vec<usize>,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seq_len: usize, n_batches: usize, seed: u64) -> Self {
        BatchPlan {
            batch_size,
            seq_len,
            order: permute(n_batches, seed),
            seed,
        }
    }
}

/// A permutation of `0..n` determined by `seed`.
pub fn permute(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Back-to-back permutations of `0..n` from one seeded stream, truncated to
/// `target` entries. With `target == n` this equals [`permute`].
pub fn permute_with_repetition(n: usize, target: usize, seed: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target + n);
    while out.len() < target {
        let mut block: Vec<usize> = (0..n).collect();
        block.shuffle(&mut rng);
        out.extend(block);
    }
    out.truncate(target);
    out
}

/// Perplexity of `weights` on each training batch in `order`, in that
/// order. No weights change.
pub fn retrospective_eval(
    exec: Exec,
    weights: &WeightVector<f32>,
    cfg: &ModelConfig,
    data: &Dataset,
    order: &[usize],
) -> Result<Vec<f64>> {
    exec.map(order.len(), |i| {
        let batch = data.batch(order[i])?;
        Ok(batch_loss(Exec::Sequential, weights, cfg, &batch)?.exp())
    })
    .into_iter()
    .collect()
}

/// Trailing moving average: entry `i` is the mean of the last
/// `min(window, i + 1)` values.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &x) in series.iter().enumerate() {
        sum += x;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// CSV with header `batch_index,perplexity`.
pub fn series_to_csv(series: &[f64]) -> String {
    let mut s = String::from("batch_index,perplexity\n");
    for (i, v) in series.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}
