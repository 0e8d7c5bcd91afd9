//! Linear probes on hidden layers, initialised from the output head.
//!
//! Activations are taken after the model's final RMSNorm (with its learned
//! gain), so a probe on the top layer initialised with the true head and
//! trained for zero steps reproduces the model's own predictions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::transformer::hidden_states_normed;
use super::{Batch, Layout, ModelConfig, SegmentKind, WeightVector};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::optimizer::{AdamW, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    /// Evaluate every this many steps (0: only before and after).
    pub eval_every: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 200,
            lr: 1e-3,
            eval_every: 50,
            optimizer: OptimizerConfig {
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub step: usize,
    pub eval_perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layer: usize,
    pub series: Vec<ProbePoint>,
    pub train_loss_before: f64,
    pub train_loss_after: f64,
}

impl ProbeReport {
    pub fn initial_perplexity(&self) -> f64 {
        self.series.first().map(|p| p.eval_perplexity).unwrap_or(f64::NAN)
    }

    pub fn final_perplexity(&self) -> f64 {
        self.series.last().map(|p| p.eval_perplexity).unwrap_or(f64::NAN)
    }
}

/// Frozen features and their next-token targets.
struct Features {
    x: Vec<f32>,
    y: Vec<u32>,
}

fn features(exec: Exec, weights: &WeightVector<f32>, cfg: &ModelConfig, batch: &Batch, layer: usize) -> Result<Features> {
    let h = hidden_states_normed(exec, weights, cfg, batch, layer)?;
    let y = (0..batch.rows()).flat_map(|r| batch.targets(r).iter().copied()).collect();
    Ok(Features { x: h.values, y })
}

/// Mean cross-entropy of the probe on `f`, and optionally its gradient.
fn probe_loss(w: &[f32], d: usize, vocab: usize, f: &Features, grad: Option<&mut [f32]>) -> f64 {
    let n = f.y.len();
    let mut total = 0.0f64;
    let mut logits = vec![0.0f32; vocab];
    let mut grad = grad;
    for (x, &y) in f.x.chunks_exact(d).zip(&f.y) {
        for (l, row) in logits.iter_mut().zip(w.chunks_exact(d)) {
            *l = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f32 = logits.iter().map(|&v| (v - max).exp()).sum();
        total += (max + sum.ln() - logits[y as usize]) as f64;
        if let Some(g) = grad.as_deref_mut() {
            for (k, (&l, grow)) in logits.iter().zip(g.chunks_exact_mut(d)).enumerate() {
                let p = (l - max).exp() / sum;
                let coef = (if k == y as usize { p - 1.0 } else { p }) / n as f32;
                for (gi, &xi) in grow.iter_mut().zip(x) {
                    *gi += coef * xi;
                }
            }
        }
    }
    total / n as f64
}

fn mean_loss(w: &[f32], d: usize, vocab: usize, sets: &[Features]) -> f64 {
    sets.iter().map(|f| probe_loss(w, d, vocab, f, None)).sum::<f64>() / sets.len() as f64
}

/// Train a linear probe on `layer` (0 = embeddings) starting from
/// `init_head` (`vocab_size x d_model`) and report eval perplexity over
/// training.
pub fn train_probe(
    exec: Exec,
    weights: &WeightVector<f32>,
    cfg: &ModelConfig,
    layer: usize,
    init_head: &[f32],
    train_batches: &[Batch],
    eval_batches: &[Batch],
    pc: &ProbeConfig,
) -> Result<ProbeReport> {
    let (d, vocab) = (cfg.d_model, cfg.vocab_size);
    if init_head.len() != d * vocab {
        return Err(Error::Shape(format!(
            "probe init has {} values, expected {vocab} x {d}",
            init_head.len()
        )));
    }
    if eval_batches.is_empty() {
        return Err(Error::Empty("probe evaluation set".into()));
    }
    if train_batches.is_empty() && pc.steps > 0 {
        return Err(Error::Empty("probe training set".into()));
    }
    let train: Vec<Features> = train_batches
        .iter()
        .map(|b| features(exec, weights, cfg, b, layer))
        .collect::<Result<_>>()?;
    let eval: Vec<Features> = eval_batches
        .iter()
        .map(|b| features(exec, weights, cfg, b, layer))
        .collect::<Result<_>>()?;

    let layout = Arc::new(Layout::single("probe", SegmentKind::Head, vec![vocab, d]));
    let mut probe = WeightVector::from_values(layout.clone(), init_head.to_vec())?;
    let mut opt = AdamW::new(pc.optimizer, layout.clone());

    let train_loss_before = if train.is_empty() {
        f64::NAN
    } else {
        mean_loss(probe.values(), d, vocab, &train)
    };
    let mut series = vec![ProbePoint {
        step: 0,
        eval_perplexity: mean_loss(probe.values(), d, vocab, &eval).exp(),
    }];
    for step in 1..=pc.steps {
        let f = &train[(step - 1) % train.len()];
        let mut g = WeightVector::zeros(layout.clone());
        probe_loss(probe.values(), d, vocab, f, Some(g.values_mut()));
        opt.step(&mut probe, g, pc.lr)?;
        if step == pc.steps || (pc.eval_every > 0 && step % pc.eval_every == 0) {
            series.push(ProbePoint {
                step,
                eval_perplexity: mean_loss(probe.values(), d, vocab, &eval).exp(),
            });
        }
    }
    let train_loss_after = if train.is_empty() {
        f64::NAN
    } else {
        mean_loss(probe.values(), d, vocab, &train)
    };
    Ok(ProbeReport {
        layer,
        series,
        train_loss_before,
        train_loss_after,
    })
}
