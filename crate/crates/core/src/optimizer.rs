//! AdamW with decoupled weight decay, global-norm clipping, batch-size
//! rescaling helpers and momentum/gradient alignment.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layout, SegmentKind, WeightVector};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// When false, norm gains are excluded from weight decay.
    pub decay_norms: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: Some(1.0),
            decay_norms: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Both betas raised to `p`.
    pub fn with_beta_power(&self, p: f64) -> Self {
        OptimizerConfig {
            beta1: rescale_beta(self.beta1, p),
            beta2: rescale_beta(self.beta2, p),
            ..*self
        }
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub exp_avg: WeightVector<T>,
    pub exp_avg_sq: WeightVector<T>,
    pub step_count: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(layout: Arc<Layout>) -> Self {
        OptimizerState {
            exp_avg: WeightVector::zeros(layout.clone()),
            exp_avg_sq: WeightVector::zeros(layout),
            step_count: 0,
        }
    }

    pub fn for_weights(weights: &WeightVector<T>) -> Self {
        Self::new(weights.layout().clone())
    }

    /// Zero both moments and the step counter.
    pub fn reset(&mut self) {
        self.exp_avg.values_mut().fill(T::zero());
        self.exp_avg_sq.values_mut().fill(T::zero());
        self.step_count = 0;
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.exp_avg.layout()
    }
}

/// Global L2 norm of a gradient, accumulated in f64.
pub fn global_norm<T: Real>(grads: &WeightVector<T>) -> f64 {
    grads.norm()
}

/// Rescale `grads` in place so its global norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut WeightVector<T>, clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = T::of(clip_norm / norm);
        for g in grads.values_mut() {
            *g = *g * s;
        }
    }
    norm
}

/// One AdamW update with bias correction (`t` = step count after the
/// increment) and decoupled decay `-lr * weight_decay * w`. No clipping.
pub fn adamw_step<T: Real>(
    weights: &mut WeightVector<T>,
    grads: &WeightVector<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    weights.check_layout(grads)?;
    weights.check_layout(&state.exp_avg)?;
    if !(lr >= 0.0) {
        return Err(Error::Domain {
            value: lr,
            domain: "lr >= 0",
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powi(t));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr_t = T::of(lr);
    let eps = T::of(cfg.eps);
    let layout = weights.layout().clone();
    let w = weights.values_mut();
    let m = state.exp_avg.values_mut();
    let v = state.exp_avg_sq.values_mut();
    let g = grads.values();
    for seg in layout.segments() {
        let decay = if cfg.decay_norms || seg.kind != SegmentKind::Norm {
            T::of(cfg.weight_decay)
        } else {
            T::zero()
        };
        for i in seg.offset..seg.offset + seg.len {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] = w[i] - lr_t * decay * w[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// AdamW bundled with its state; [`step`](Self::step) clips and then
/// accumulates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T = f32> {
    pub config: OptimizerConfig,
    pub state: OptimizerState<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: OptimizerConfig, layout: Arc<Layout>) -> Self {
        AdamW {
            config,
            state: OptimizerState::new(layout),
        }
    }

    pub fn step(&mut self, weights: &mut WeightVector<T>, mut grads: WeightVector<T>, lr: f64) -> Result<StepStats> {
        let (grad_norm, clipped) = match self.config.clip_norm {
            Some(c) => {
                let n = clip_gradients(&mut grads, c);
                (n, n > c)
            }
            None => (global_norm(&grads), false),
        };
        adamw_step(weights, &grads, &mut self.state, lr, &self.config)?;
        Ok(StepStats { grad_norm, clipped })
    }
}

/// `beta^k`: the momentum that keeps the per-token half-life when the
/// batch grows by a factor `k`.
pub fn rescale_beta(beta: f64, k: f64) -> f64 {
    beta.powf(k)
}

/// Tokens after which an EMA with coefficient `beta` has accumulated half
/// of its mass: `ln(0.5)/ln(beta) * tokens_per_step`.
pub fn token_half_life(beta: f64, tokens_per_step: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Domain {
            value: beta,
            domain: "beta in (0, 1)",
        });
    }
    Ok(0.5f64.ln() / beta.ln() * tokens_per_step)
}

/// Learning-rate multiplier for a batch `k` times larger than the base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrScaleRule {
    #[default]
    Sqrt,
    /// `(k, multiplier)` pairs; scales not listed fall back to `sqrt(k)`.
    Table(Vec<(f64, f64)>),
}

impl LrScaleRule {
    /// Hand-tuned multipliers for a base batch of 200 sequences at batch
    /// sizes 200, 400, 800, 1600 and 2000.
    pub fn tuned_table() -> Self {
        LrScaleRule::Table(vec![(1.0, 1.06), (2.0, 1.50), (4.0, 2.12), (8.0, 3.00), (10.0, 3.35)])
    }

    pub fn factor(&self, k: f64) -> f64 {
        match self {
            LrScaleRule::Sqrt => lr_scale_for_batch(k),
            LrScaleRule::Table(rows) => rows
                .iter()
                .find(|(kk, _)| (kk - k).abs() < 1e-9)
                .map(|&(_, m)| m)
                .unwrap_or_else(|| lr_scale_for_batch(k)),
        }
    }
}

/// Square-root learning-rate scaling.
pub fn lr_scale_for_batch(k: f64) -> f64 {
    k.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAlignment {
    pub name: String,
    pub len: usize,
    /// `None` when either vector is zero on this segment.
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub segments: Vec<SegmentAlignment>,
    /// Mean of the defined cosines weighted by element count.
    pub weighted_mean: Option<f64>,
}

/// Cosine between the first moment and a gradient, per parameter tensor.
pub fn momentum_alignment<T: Real>(state: &OptimizerState<T>, grads: &WeightVector<T>) -> Result<AlignmentReport> {
    state.exp_avg.check_layout(grads)?;
    let m = state.exp_avg.values();
    let g = grads.values();
    let mut segments = Vec::new();
    let (mut acc, mut weight) = (0.0, 0usize);
    for seg in state.layout().segments() {
        let r = seg.offset..seg.offset + seg.len;
        let (mut mg, mut mm, mut gg) = (0.0f64, 0.0f64, 0.0f64);
        for (a, b) in m[r.clone()].iter().zip(&g[r]) {
            let (a, b) = (a.f64(), b.f64());
            mg += a * b;
            mm += a * a;
            gg += b * b;
        }
        let cosine = if mm > 0.0 && gg > 0.0 {
            Some((mg / (mm.sqrt() * gg.sqrt())).clamp(-1.0, 1.0))
        } else {
            None
        };
        if let Some(c) = cosine {
            acc += c * seg.len as f64;
            weight += seg.len;
        }
        segments.push(SegmentAlignment {
            name: seg.name.clone(),
            len: seg.len,
            cosine,
        });
    }
    Ok(AlignmentReport {
        segments,
        weighted_mean: (weight > 0).then(|| acc / weight as f64),
    })
}
