//! Bias-variance decompositions (loss, weight, simple-loss and KL spaces),
//! shift/deviation of per-batch recency effects, model souping and Spearman
//! rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WeightVector;
use crate::real::Real;
use crate::schedules::CooldownShape;

/// Probability floor for KL terms; distributions are renormalised after
/// flooring.
pub const KL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Loss,
    Weight,
    LossSimple,
    Kl,
}

impl std::str::FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(Space::Loss),
            "weight" => Ok(Space::Weight),
            "loss_simple" => Ok(Space::LossSimple),
            "kl" => Ok(Space::Kl),
            _ => Err(Error::Config(format!("unknown space `{s}`"))),
        }
    }
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Space::Loss => "loss",
            Space::Weight => "weight",
            Space::LossSimple => "loss_simple",
            Space::Kl => "kl",
        })
    }
}

/// Per-token soft labels: `tokens x vocab`, each row a distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub tokens: usize,
    pub vocab: usize,
    pub probs: Vec<f64>,
}

impl Predictions {
    pub fn new(tokens: usize, vocab: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != tokens * vocab {
            return Err(Error::Shape(format!("{} probabilities for {tokens} x {vocab}", probs.len())));
        }
        Ok(Predictions { tokens, vocab, probs })
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.probs[k * self.vocab..(k + 1) * self.vocab]
    }
}

/// The runs of one cooldown shape across data orders.
#[derive(Debug, Clone)]
pub struct ExperimentSet {
    pub shape: CooldownShape,
    pub members: Vec<WeightVector<f32>>,
    pub losses: Vec<f64>,
    pub predictions: Option<Vec<Predictions>>,
}

/// Componentwise arithmetic mean. Each coordinate is summed in sorted
/// order, so the result does not depend on member order.
pub fn average_weights<T: Real>(members: &[&WeightVector<T>]) -> Result<WeightVector<T>> {
    let first = members.first().ok_or(Error::TooFewMembers { need: 1, got: 0 })?;
    for m in &members[1..] {
        first.check_layout(m)?;
    }
    let n = members.len() as f64;
    let mut column = vec![0.0f64; members.len()];
    let values = (0..first.len())
        .map(|i| {
            for (c, m) in column.iter_mut().zip(members) {
                *c = m.values()[i].f64();
            }
            column.sort_by(f64::total_cmp);
            T::of(column.iter().sum::<f64>() / n)
        })
        .collect();
    WeightVector::from_values(first.layout().clone(), values)
}

/// Loss-space decomposition of `E[L(m_i)] - L(m*)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpaceReport {
    /// `L(E[m_i]) - L(m*)`.
    pub bias: f64,
    /// `E[L(m_i)] - L(E[m_i])`.
    pub variance: f64,
    /// `(bias + variance) - (E[L(m_i)] - L(m*))`.
    pub residual: f64,
    pub mean_member_loss: f64,
    pub soup_loss: f64,
    pub reference_loss: f64,
    /// Population variance of member losses.
    pub loss_variance: f64,
}

/// Bias and variance of a shape in loss space, relative to the souped
/// reference model. `evaluate` must be the single validation loss used for
/// every term. Member losses are taken from `experiments.losses` when
/// present, otherwise evaluated.
pub fn bias_variance_loss_space(
    experiments: &ExperimentSet,
    references: &[WeightVector<f32>],
    evaluate: &dyn Fn(&WeightVector<f32>) -> Result<f64>,
) -> Result<LossSpaceReport> {
    let n = experiments.members.len();
    if n == 0 {
        return Err(Error::TooFewMembers { need: 1, got: 0 });
    }
    if references.is_empty() {
        return Err(Error::TooFewMembers { need: 1, got: 0 });
    }
    let losses = if experiments.losses.len() == n {
        experiments.losses.clone()
    } else {
        experiments.members.iter().map(evaluate).collect::<Result<Vec<_>>>()?
    };
    let soup = average_weights(&experiments.members.iter().collect::<Vec<_>>())?;
    let reference = average_weights(&references.iter().collect::<Vec<_>>())?;
    soup.check_layout(&reference)?;
    let soup_loss = evaluate(&soup)?;
    let reference_loss = evaluate(&reference)?;
    Ok(loss_space_from_values(&losses, soup_loss, reference_loss))
}

/// The loss-space terms from already evaluated losses.
pub fn loss_space_from_values(member_losses: &[f64], soup_loss: f64, reference_loss: f64) -> LossSpaceReport {
    let n = member_losses.len() as f64;
    let mean = member_losses.iter().sum::<f64>() / n;
    let bias = soup_loss - reference_loss;
    let variance = mean - soup_loss;
    let loss_variance = member_losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    LossSpaceReport {
        bias,
        variance,
        residual: (bias + variance) - (mean - reference_loss),
        mean_member_loss: mean,
        soup_loss,
        reference_loss,
        loss_variance,
    }
}

/// Weight-space bias `||mean(r) - mean(s)||` and unbiased scatter
/// `1/(N-1) sum ||s_n - mean(s)||^2`.
pub fn bias_variance_weight_space<T: Real>(
    members: &[WeightVector<T>],
    references: &[WeightVector<T>],
) -> Result<(f64, f64)> {
    if members.len() < 2 {
        return Err(Error::TooFewMembers {
            need: 2,
            got: members.len(),
        });
    }
    if references.is_empty() {
        return Err(Error::TooFewMembers { need: 1, got: 0 });
    }
    for w in members.iter().chain(references) {
        members[0].check_layout(w)?;
    }
    let len = members[0].len();
    let (n, nr) = (members.len() as f64, references.len() as f64);
    let mut bias_sq = 0.0;
    let mut scatter = 0.0;
    for i in 0..len {
        let ms = members.iter().map(|m| m.values()[i].f64()).sum::<f64>() / n;
        let mr = references.iter().map(|r| r.values()[i].f64()).sum::<f64>() / nr;
        bias_sq += (mr - ms).powi(2);
        scatter += members.iter().map(|m| (m.values()[i].f64() - ms).powi(2)).sum::<f64>();
    }
    Ok((bias_sq.sqrt(), scatter / (n - 1.0)))
}

/// Mean and population variance of member losses.
pub fn bias_variance_loss_simple(losses: &[f64]) -> Result<(f64, f64)> {
    if losses.len() < 2 {
        return Err(Error::TooFewMembers {
            need: 2,
            got: losses.len(),
        });
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var))
}

fn mean_predictions(preds: &[Predictions]) -> Result<Predictions> {
    let first = preds.first().ok_or(Error::TooFewMembers { need: 1, got: 0 })?;
    if preds.iter().any(|p| p.tokens != first.tokens || p.vocab != first.vocab) {
        return Err(Error::Shape("prediction sets differ in shape".into()));
    }
    let n = preds.len() as f64;
    let probs = (0..first.probs.len())
        .map(|i| preds.iter().map(|p| p.probs[i]).sum::<f64>() / n)
        .collect();
    Predictions::new(first.tokens, first.vocab, probs)
}

fn floored(row: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = row.iter().map(|&p| p.max(KL_EPS)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|p| p / s).collect()
}

/// `KL(p || q)` after flooring both at [`KL_EPS`] and renormalising.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let (p, q) = (floored(p), floored(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// KL-space bias (mean over tokens of `KL(mean reference || mean member)`)
/// and variance (mean squared deviation of member soft labels from their
/// mean, averaged over members and tokens).
pub fn bias_variance_kl_space(members: &[Predictions], references: &[Predictions]) -> Result<(f64, f64)> {
    if members.is_empty() || references.is_empty() {
        return Err(Error::TooFewMembers { need: 1, got: 0 });
    }
    let ms = mean_predictions(members)?;
    let rs = mean_predictions(references)?;
    if ms.tokens != rs.tokens || ms.vocab != rs.vocab {
        return Err(Error::Shape("member and reference predictions differ in shape".into()));
    }
    let k = ms.tokens as f64;
    let bias = (0..ms.tokens).map(|t| kl_divergence(rs.row(t), ms.row(t))).sum::<f64>() / k;
    let mut var = 0.0;
    for m in members {
        for (a, b) in m.probs.iter().zip(&ms.probs) {
            var += (a - b).powi(2);
        }
    }
    Ok((bias, var / (members.len() as f64 * k)))
}

/// Which batches the shift is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShiftWindow {
    /// Only batches seen during cooldown (`P < i <= N`).
    #[default]
    Cooldown,
    /// Every training batch.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftDeviation {
    pub shift: f64,
    pub deviation: f64,
    /// `post - pre` per batch, in training order.
    pub differences: Vec<f64>,
}

/// Shift and deviation of the per-batch difference `post_i - pre_i`.
/// Deviation always averages over all `N` batches.
pub fn shift_deviation(pre: &[f64], post: &[f64], cooldown_start: usize, window: ShiftWindow) -> Result<ShiftDeviation> {
    if pre.len() != post.len() {
        return Err(Error::Shape(format!("series lengths {} and {}", pre.len(), post.len())));
    }
    let n = pre.len();
    if cooldown_start >= n {
        return Err(Error::Empty("cooldown range".into()));
    }
    let differences: Vec<f64> = post.iter().zip(pre).map(|(c, p)| c - p).collect();
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let shift = match window {
        ShiftWindow::Cooldown => avg(&differences[cooldown_start..]),
        ShiftWindow::All => avg(&differences),
    };
    let deviation = differences.iter().map(|d| (d - shift).powi(2)).sum::<f64>() / n as f64;
    Ok(ShiftDeviation {
        shift,
        deviation,
        differences,
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// Undefined (an error) when either input is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("lengths {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::TooFewMembers { need: 2, got: xs.len() });
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("rank correlation of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layout, SegmentKind};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn wv(v: Vec<f64>) -> WeightVector<f64> {
        let l = Arc::new(Layout::single("w", SegmentKind::Matrix, vec![v.len()]));
        WeightVector::from_values(l, v).unwrap()
    }

    #[test]
    fn averaging_examples() {
        let v = wv(vec![1.0, -2.0, 3.5]);
        assert_eq!(average_weights(&[&v, &v, &v]).unwrap(), v);
        let neg = v.scale(-1.0);
        assert!(average_weights(&[&v, &neg]).unwrap().values().iter().all(|&x| x == 0.0));
        assert!(average_weights::<f64>(&[]).is_err());
        let other = wv(vec![1.0]);
        assert!(matches!(average_weights(&[&v, &other]), Err(Error::Layout(_))));
    }

    #[test]
    fn weight_space_examples() {
        let v = wv(vec![1.0, 2.0, 2.0]);
        let members = vec![v.clone(), v.scale(-1.0)];
        let (bias, var) = bias_variance_weight_space(&members, &members).unwrap();
        assert_eq!(bias, 0.0);
        assert!((var - 2.0 * v.norm_sq()).abs() < 1e-12);
        assert!(bias_variance_weight_space(&members[..1], &members).is_err());
    }

    #[test]
    fn loss_simple_examples() {
        assert_eq!(bias_variance_loss_simple(&[2.0, 2.0, 2.0]).unwrap(), (2.0, 0.0));
        assert_eq!(bias_variance_loss_simple(&[1.0, 3.0]).unwrap(), (2.0, 1.0));
        let (m, v) = bias_variance_loss_simple(&[1.5, 3.5]).unwrap();
        assert_eq!((m, v), (2.5, 1.0));
    }

    #[test]
    fn loss_space_single_member_has_zero_variance() {
        let r = loss_space_from_values(&[3.2], 3.2, 3.0);
        assert_eq!(r.variance, 0.0);
        assert!((r.bias - 0.2).abs() < 1e-15);
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn kl_examples() {
        let p = Predictions::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let q = Predictions::new(2, 2, vec![0.9, 0.1, 0.9, 0.1]).unwrap();
        let (bias, var) = bias_variance_kl_space(&[q.clone(), q.clone()], &[p.clone()]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((bias - expected).abs() < 1e-9);
        assert!((expected - 0.5108).abs() < 1e-4);
        assert_eq!(var, 0.0);
        let (b0, _) = bias_variance_kl_space(&[p.clone()], &[p.clone()]).unwrap();
        assert!(b0.abs() < 1e-15);
        let z = Predictions::new(1, 2, vec![1.0, 0.0]).unwrap();
        let o = Predictions::new(1, 2, vec![0.0, 1.0]).unwrap();
        let (b, v) = bias_variance_kl_space(&[z.clone(), o], &[z]).unwrap();
        assert!(b.is_finite() && b > 0.0);
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shift_deviation_examples() {
        let pre = [0.0; 3];
        let sd = shift_deviation(&pre, &[1.0, 2.0, 3.0], 1, ShiftWindow::Cooldown).unwrap();
        assert!((sd.shift - 2.5).abs() < 1e-15);
        assert!((sd.deviation - 2.75 / 3.0).abs() < 1e-15);
        let all = shift_deviation(&pre, &[1.0, 2.0, 3.0], 1, ShiftWindow::All).unwrap();
        assert!((all.shift - 2.0).abs() < 1e-15);
        assert!((all.deviation - 2.0 / 3.0).abs() < 1e-15);
        let c = shift_deviation(&[1.0; 4], &[3.5; 4], 2, ShiftWindow::Cooldown).unwrap();
        assert_eq!((c.shift, c.deviation), (2.5, 0.0));
        assert!(matches!(shift_deviation(&pre, &pre, 3, ShiftWindow::Cooldown), Err(Error::Empty(_))));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    /// Brute force over ranks: `1 - 6 sum d^2 / (n (n^2 - 1))` for
    /// tie-free data.
    fn spearman_rank_difference(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len();
        let rank = |v: &[f64], i: usize| 1 + v.iter().filter(|&&x| x < v[i]).count();
        let d2: usize = (0..n)
            .map(|i| {
                let d = rank(xs, i) as i64 - rank(ys, i) as i64;
                (d * d) as usize
            })
            .sum();
        1.0 - 6.0 * d2 as f64 / (n * (n * n - 1)) as f64
    }

    proptest! {
        #[test]
        fn spearman_matches_rank_difference_formula(perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle()) {
            let xs: Vec<f64> = (0..8).map(|i| i as f64 * 1.5).collect();
            let ys: Vec<f64> = perm.iter().map(|&p| p as f64).collect();
            let a = spearman(&xs, &ys).unwrap();
            prop_assert!((a - spearman_rank_difference(&xs, &ys)).abs() < 1e-12);
        }

        #[test]
        fn weight_variance_translation_invariant(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(-3.0f64..3.0, 4),
            c in proptest::collection::vec(-3.0f64..3.0, 4),
            shift in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let members = vec![wv(a), wv(b)];
            let refs = vec![wv(c)];
            let t = wv(shift);
            let moved: Vec<_> = members.iter().map(|m| m.add_scaled(1.0, &t).unwrap()).collect();
            let moved_refs: Vec<_> = refs.iter().map(|m| m.add_scaled(1.0, &t).unwrap()).collect();
            let (b0, v0) = bias_variance_weight_space(&members, &refs).unwrap();
            let (b1, v1) = bias_variance_weight_space(&moved, &moved_refs).unwrap();
            prop_assert!((v0 - v1).abs() < 1e-9);
            prop_assert!((b0 - b1).abs() < 1e-9);
        }

        #[test]
        fn average_is_order_invariant(vals in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 5), 2..6)) {
            let ws: Vec<_> = vals.into_iter().map(wv).collect();
            let fwd: Vec<_> = ws.iter().collect();
            let rev: Vec<_> = ws.iter().rev().collect();
            prop_assert_eq!(average_weights(&fwd).unwrap(), average_weights(&rev).unwrap());
        }

        #[test]
        fn loss_space_residual_vanishes(
            losses in proptest::collection::vec(0.0f64..20.0, 1..12),
            soup in 0.0f64..20.0,
            reference in 0.0f64..20.0,
        ) {
            let r = loss_space_from_values(&losses, soup, reference);
            prop_assert!(r.residual.abs() < 1e-9);
        }

        #[test]
        fn shift_variants_agree_at_zero(d in proptest::collection::vec(-5.0f64..5.0, 1..30)) {
            let pre = vec![0.0; d.len()];
            let a = shift_deviation(&pre, &d, 0, ShiftWindow::Cooldown).unwrap();
            let b = shift_deviation(&pre, &d, 0, ShiftWindow::All).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
