//! Two-dimensional loss landscapes around a checkpoint.
//!
//! `e1` is the global optimization direction (pre-cooldown checkpoint to
//! final model), `e2` the displacement of a few Adam steps. Directions are
//! used raw and kept in f64: the difference of two f32 vectors is exact
//! there, so `pre + 1 * e1` reproduces the final checkpoint bit for bit.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{gradients, Batch, Checkpoint, ModelConfig, WeightVector};
use crate::optimizer::{AdamW, OptimizerConfig, OptimizerState};
use crate::trainer::mean_loss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GlobalOptimization,
    AdamSteps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub vector: WeightVector<f64>,
    pub norm: f64,
    pub provenance: Provenance,
}

impl Direction {
    fn new(vector: WeightVector<f64>, provenance: Provenance) -> Result<Self> {
        let norm = vector.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite("direction".into()));
        }
        if norm == 0.0 {
            return Err(Error::Degenerate("zero direction".into()));
        }
        Ok(Direction {
            vector,
            norm,
            provenance,
        })
    }

    pub fn cosine(&self, other: &Direction) -> Result<f64> {
        Ok(self.vector.dot(&other.vector)? / (self.norm * other.norm))
    }

    /// The same direction scaled by `c`.
    pub fn scaled(&self, c: f64) -> Result<Direction> {
        Direction::new(self.vector.scale(c), self.provenance)
    }
}

/// `final - pre`.
pub fn global_direction(pre: &WeightVector<f32>, fin: &WeightVector<f32>) -> Result<Direction> {
    Direction::new(fin.cast::<f64>().sub(&pre.cast())?, Provenance::GlobalOptimization)
}

/// Displacement after `batches.len()` AdamW steps (with clipping, as in
/// training) at learning rate `lr`, starting from the checkpoint's weights
/// and optimizer state. Works on copies; the checkpoint is untouched.
pub fn adam_steps_direction(
    ckpt: &Checkpoint,
    opt: &OptimizerConfig,
    lr: f64,
    batches: &[Batch],
) -> Result<Direction> {
    if batches.is_empty() {
        return Err(Error::Config("need at least one probing step".into()));
    }
    let mut w = ckpt.weights.clone();
    let state = ckpt
        .optimizer
        .clone()
        .unwrap_or_else(|| OptimizerState::for_weights(&w));
    let mut adam = AdamW { config: *opt, state };
    for b in batches {
        let g = gradients(&w, &ckpt.config, b)?;
        adam.step(&mut w, g, lr)?;
        if !w.is_finite() {
            return Err(Error::NonFinite("weights during probing steps".into()));
        }
    }
    global_direction(&ckpt.weights, &w).map(|d| Direction {
        provenance: Provenance::AdamSteps,
        ..d
    })
}

/// `center + a * e1 + b * e2`, accumulated in f64 and rounded once.
pub fn grid_point(center: &WeightVector<f32>, e1: &Direction, e2: &Direction, a: f64, b: f64) -> Result<WeightVector<f32>> {
    center.check_layout(&e1.vector.cast())?;
    center.check_layout(&e2.vector.cast())?;
    let values = center
        .values()
        .iter()
        .zip(e1.vector.values().iter().zip(e2.vector.values()))
        .map(|(&c, (&x, &y))| (c as f64 + a * x + b * y) as f32)
        .collect();
    WeightVector::from_values(center.layout().clone(), values)
}

/// SHA-256 over the tokens of an evaluation set.
pub fn eval_digest(batches: &[Batch]) -> String {
    let mut h = Sha256::new();
    for b in batches {
        h.update((b.rows() as u64).to_le_bytes());
        for t in b.tokens() {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Perplexities over an `a x b` grid. Non-finite cells are stored as-is
/// and listed in `flagged`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub center_id: String,
    pub e1_norm: f64,
    pub e2_norm: f64,
    pub e1_provenance: Provenance,
    pub e2_provenance: Provenance,
    pub cosine_e1_e2: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `values[i][j]` is the perplexity at `(a[i], b[j])`.
    pub values: Vec<Vec<f64>>,
    pub flagged: Vec<(usize, usize)>,
    pub eval_digest: String,
}

impl LandscapeGrid {
    pub fn value(&self, a: f64, b: f64) -> Option<f64> {
        let i = self.a.iter().position(|&x| x == a)?;
        let j = self.b.iter().position(|&y| y == b)?;
        Some(self.values[i][j])
    }

    /// CSV with header `a,b,perplexity`, `a`-major.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("a,b,perplexity\n");
        for (i, a) in self.a.iter().enumerate() {
            for (j, b) in self.b.iter().enumerate() {
                s.push_str(&format!("{a},{b},{}\n", self.values[i][j]));
            }
        }
        s
    }

    /// Metadata without the value matrix.
    pub fn metadata_json(&self) -> String {
        let meta = serde_json::json!({
            "center_id": self.center_id,
            "e1_norm": self.e1_norm,
            "e2_norm": self.e2_norm,
            "e1_provenance": self.e1_provenance,
            "e2_provenance": self.e2_provenance,
            "cosine_e1_e2": self.cosine_e1_e2,
            "a": self.a,
            "b": self.b,
            "flagged": self.flagged,
            "eval_digest": self.eval_digest,
        });
        serde_json::to_string_pretty(&meta).expect("metadata serializes")
    }
}

fn check_coefficients(name: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Config(format!("{name} coefficient list is empty")));
    }
    if xs.iter().any(|x| !x.is_finite()) || xs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!("{name} coefficients must be finite and strictly increasing")));
    }
    Ok(())
}

/// Evaluate perplexity at every `(a, b)`; cells run through `exec`.
#[allow(clippy::too_many_arguments)]
pub fn scan_grid(
    exec: Exec,
    center: &WeightVector<f32>,
    center_id: &str,
    cfg: &ModelConfig,
    e1: &Direction,
    e2: &Direction,
    a: &[f64],
    b: &[f64],
    eval: &[Batch],
) -> Result<LandscapeGrid> {
    check_coefficients("a", a)?;
    check_coefficients("b", b)?;
    let cells = exec.map(a.len() * b.len(), |k| {
        let w = grid_point(center, e1, e2, a[k / b.len()], b[k % b.len()])?;
        Ok(mean_loss(Exec::Sequential, &w, cfg, eval)?.exp())
    });
    let cells = cells.into_iter().collect::<Result<Vec<f64>>>()?;
    let flagged = (0..cells.len())
        .filter(|&k| !cells[k].is_finite())
        .map(|k| (k / b.len(), k % b.len()))
        .collect();
    Ok(LandscapeGrid {
        center_id: center_id.to_string(),
        e1_norm: e1.norm,
        e2_norm: e2.norm,
        e1_provenance: e1.provenance,
        e2_provenance: e2.provenance,
        cosine_e1_e2: e1.cosine(e2)?,
        a: a.to_vec(),
        b: b.to_vec(),
        values: cells.chunks(b.len()).map(<[f64]>::to_vec).collect(),
        flagged,
        eval_digest: eval_digest(eval),
    })
}

/// `n` evenly spaced points from `lo` to `hi` inclusive. Points are
/// computed as `lo + i * step`, except that an exact zero crossing is
/// snapped to 0 so the grid contains the center.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let x = if i == n - 1 { hi } else { lo + i as f64 * step };
            if (x / step).abs() < 1e-9 {
                0.0
            } else {
                x
            }
        })
        .collect()
}

/// Coefficient ranges for a grid, in units of the raw directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub a_range: (f64, f64),
    pub b_range: (f64, f64),
    pub points: usize,
}

impl GridSpec {
    pub fn coarse() -> Self {
        GridSpec {
            a_range: (-0.5, 1.5),
            b_range: (-2.0, 2.0),
            points: 17,
        }
    }

    pub fn fine() -> Self {
        GridSpec {
            a_range: (-0.25, 0.25),
            b_range: (-0.5, 0.5),
            points: 17,
        }
    }

    pub fn coefficients(&self) -> (Vec<f64>, Vec<f64>) {
        (
            linspace(self.a_range.0, self.a_range.1, self.points),
            linspace(self.b_range.0, self.b_range.1, self.points),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            ffw_dim: 16,
            head_dim: 4,
            n_heads: 2,
            vocab_size: 11,
            seq_len: 6,
        }
    }

    fn batches(n: usize) -> Vec<Batch> {
        (0..n)
            .map(|k| Batch::new(2, 6, (0..14).map(|i| ((i * 5 + k * 3) % 11) as u32).collect()).unwrap())
            .collect()
    }

    #[test]
    fn global_direction_cases() {
        let c = cfg();
        let pre = WeightVector::init(&c, 1);
        let fin = WeightVector::init(&c, 2);
        assert!(matches!(global_direction(&pre, &pre), Err(Error::Degenerate(_))));
        let d = global_direction(&pre, &fin).unwrap();
        let back = global_direction(&fin, &pre).unwrap();
        assert!(d.vector.values().iter().zip(back.vector.values()).all(|(x, y)| *x == -*y));
        assert_eq!(grid_point(&pre, &d, &d, 1.0, 0.0).unwrap(), fin);
    }

    #[test]
    fn center_and_unit_step_are_exact() {
        let c = cfg();
        let pre = WeightVector::init(&c, 1);
        let fin = WeightVector::init(&c, 2);
        let e1 = global_direction(&pre, &fin).unwrap();
        let ck = Checkpoint::new(c, 0, pre.clone(), None);
        let e2 = adam_steps_direction(&ck, &OptimizerConfig::default(), 1e-2, &batches(3)).unwrap();
        let eval = batches(2);
        let grid = scan_grid(Exec::Parallel, &pre, "pre", &c, &e1, &e2, &[-0.5, 0.0, 1.0], &[0.0, 0.5], &eval).unwrap();
        assert_eq!(grid.values.len(), 3);
        assert_eq!(grid.value(0.0, 0.0).unwrap(), mean_loss(Exec::Sequential, &pre, &c, &eval).unwrap().exp());
        assert_eq!(grid.value(1.0, 0.0).unwrap(), mean_loss(Exec::Sequential, &fin, &c, &eval).unwrap().exp());
        let seq = scan_grid(Exec::Sequential, &pre, "pre", &c, &e1, &e2, &[-0.5, 0.0, 1.0], &[0.0, 0.5], &eval).unwrap();
        assert_eq!(seq, grid);
        assert!(grid.flagged.is_empty());
        assert_eq!(grid.to_csv().lines().count(), 7);
    }

    #[test]
    fn probing_is_side_effect_free() {
        let c = cfg();
        let w = WeightVector::init(&c, 4);
        let ck = Checkpoint::new(c, 5, w.clone(), Some(OptimizerState::for_weights(&w)));
        let bytes = ck.to_bytes();
        let d1 = adam_steps_direction(&ck, &OptimizerConfig::default(), 1e-3, &batches(10)).unwrap();
        assert_eq!(ck.to_bytes(), bytes);
        let d2 = adam_steps_direction(&ck, &OptimizerConfig::default(), 1e-3, &batches(10)).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.provenance, Provenance::AdamSteps);
    }

    #[test]
    fn zero_lr_gives_degenerate_direction() {
        let c = cfg();
        let w = WeightVector::init(&c, 4);
        let ck = Checkpoint::new(c, 0, w, None);
        let opt = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        assert!(matches!(adam_steps_direction(&ck, &opt, 0.0, &batches(1)), Err(Error::Degenerate(_))));
        assert!(adam_steps_direction(&ck, &opt, 1e-3, &[]).is_err());
    }

    #[test]
    fn coefficient_lists_are_checked() {
        let c = cfg();
        let pre = WeightVector::init(&c, 1);
        let e = global_direction(&pre, &WeightVector::init(&c, 2)).unwrap();
        let eval = batches(1);
        assert!(scan_grid(Exec::Sequential, &pre, "x", &c, &e, &e, &[1.0, 0.0], &[0.0], &eval).is_err());
        assert!(scan_grid(Exec::Sequential, &pre, "x", &c, &e, &e, &[], &[0.0], &eval).is_err());
    }

    #[test]
    fn default_grids_contain_center() {
        for g in [GridSpec::coarse(), GridSpec::fine()] {
            let (a, b) = g.coefficients();
            assert_eq!(a.len(), 17);
            assert!(a.contains(&0.0) && b.contains(&0.0));
            assert!(a.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(GridSpec::coarse().coefficients().0.contains(&1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn rescaling_e2_by_power_of_two_is_invisible(k in -4i32..5, b in -2.0f64..2.0) {
            let c = cfg();
            let pre = WeightVector::init(&c, 1);
            let e1 = global_direction(&pre, &WeightVector::init(&c, 2)).unwrap();
            let e2 = global_direction(&pre, &WeightVector::init(&c, 3)).unwrap();
            let s = 2f64.powi(k);
            let eval = batches(1);
            let g1 = scan_grid(Exec::Sequential, &pre, "x", &c, &e1, &e2, &[0.25], &[b], &eval).unwrap();
            let g2 = scan_grid(Exec::Sequential, &pre, "x", &c, &e1, &e2.scaled(s).unwrap(), &[0.25], &[b / s], &eval).unwrap();
            prop_assert_eq!(g1.values, g2.values);
        }

        #[test]
        fn rescaling_e2_by_any_factor_is_invisible_to_rounding(s in 0.1f64..10.0, b in -2.0f64..2.0) {
            let c = cfg();
            let pre = WeightVector::init(&c, 1);
            let e1 = global_direction(&pre, &WeightVector::init(&c, 2)).unwrap();
            let e2 = global_direction(&pre, &WeightVector::init(&c, 3)).unwrap();
            let eval = batches(1);
            let g1 = scan_grid(Exec::Sequential, &pre, "x", &c, &e1, &e2, &[0.25], &[b], &eval).unwrap();
            let g2 = scan_grid(Exec::Sequential, &pre, "x", &c, &e1, &e2.scaled(s).unwrap(), &[0.25], &[b / s], &eval).unwrap();
            let (x, y) = (g1.values[0][0], g2.values[0][0]);
            prop_assert!((x - y).abs() <= 1e-5 * x);
        }
    }
}
