//! Training runs: base (pre-cooldown) training, cooldown resumption,
//! permutation sweeps, reference runs, constant-lr controls and disjoint
//! data cooldowns for souping.
//!
//! A run covers global steps `start + 1 ..= end`. Update `s` uses
//! `schedule.lr_at(s)`, so a cooldown resumed from a checkpoint at the
//! cooldown start continues the same curve the base run was on.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::Predictions;
use crate::data::{moving_average, permute_with_repetition, Dataset};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward_with, loss_and_gradients, row_losses, Batch, Checkpoint, ModelConfig, WeightVector};
use crate::optimizer::{clip_gradients, global_norm, momentum_alignment, AdamW, OptimizerConfig, OptimizerState};
use crate::schedules::{CooldownShape, ScheduleSpec};

/// Which training batches a run visits and in what order.
///
/// The run draws `steps * batches_per_step` indices from back-to-back
/// seeded permutations of `start..start + len`. When the run is exactly as
/// long as the portion this is one permutation, so every run over the same
/// portion consumes the same multiset of batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub start: usize,
    pub len: usize,
    pub order_seed: u64,
    #[serde(default = "one")]
    pub batches_per_step: usize,
}

fn one() -> usize {
    1
}

impl DataSpec {
    pub fn new(start: usize, len: usize, order_seed: u64) -> Self {
        DataSpec {
            start,
            len,
            order_seed,
            batches_per_step: 1,
        }
    }

    /// Batch indices for `steps` updates, in visiting order.
    pub fn order(&self, steps: usize) -> Vec<usize> {
        permute_with_repetition(self.len, steps * self.batches_per_step, self.order_seed)
            .into_iter()
            .map(|i| self.start + i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunFlags {
    /// Start from fresh moments instead of the checkpoint's.
    pub reset_optimizer: bool,
    /// Train with zero weight decay.
    pub no_weight_decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub optimizer: OptimizerConfig,
    pub data: DataSpec,
    /// Content id of the checkpoint this run resumes from.
    #[serde(default)]
    pub resume_from: Option<String>,
    #[serde(default)]
    pub flags: RunFlags,
    /// Validation every this many steps (0: only at the end).
    pub eval_every: u64,
    /// Initialisation seed for fresh runs.
    pub seed: u64,
    /// Last global step to run; defaults to the end of the schedule.
    #[serde(default)]
    pub stop_at: Option<u64>,
    #[serde(default)]
    pub exec: Exec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if self.data.len == 0 || self.data.batches_per_step == 0 {
            return Err(Error::Config("data portion and batches_per_step must be positive".into()));
        }
        if let Some(s) = self.stop_at {
            if s > self.schedule.total_steps() {
                return Err(Error::Config(format!(
                    "stop_at {s} is past the schedule end {}",
                    self.schedule.total_steps()
                )));
            }
        }
        Ok(())
    }

    pub fn end_step(&self) -> u64 {
        self.stop_at.unwrap_or_else(|| self.schedule.total_steps())
    }

    fn effective_optimizer(&self) -> OptimizerConfig {
        let mut o = self.optimizer;
        if self.flags.no_weight_decay {
            o.weight_decay = 0.0;
        }
        o
    }
}

/// One logged step. `val_loss` is present on evaluation steps only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    /// Cosine between the first moment before the update and the raw
    /// gradient, averaged over tensors by size.
    pub alignment: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_perplexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped at `step` because the loss or an update was not finite.
    Diverged { step: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub start_step: u64,
    pub metrics: Vec<MetricRow>,
    pub final_val_loss: f64,
    pub final_checkpoint: String,
    /// Batch indices in the order they were trained on.
    pub order: Vec<usize>,
    pub status: RunStatus,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn final_perplexity(&self) -> f64 {
        self.final_val_loss.exp()
    }

    /// One JSON object per metric row.
    pub fn metrics_jsonl(&self) -> String {
        let mut s = String::new();
        for m in &self.metrics {
            s.push_str(&serde_json::to_string(m).expect("metric rows serialize"));
            s.push('\n');
        }
        s
    }

    pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<MetricRow>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    /// `(step, grad_norm, alignment)` smoothed with a trailing window.
    pub fn smoothed_dynamics(&self, window: usize) -> Vec<(u64, f64, f64)> {
        let g: Vec<f64> = self.metrics.iter().map(|m| m.grad_norm).collect();
        let a: Vec<f64> = self.metrics.iter().map(|m| m.alignment.unwrap_or(0.0)).collect();
        let (g, a) = (moving_average(&g, window), moving_average(&a, window));
        self.metrics
            .iter()
            .zip(g.into_iter().zip(a))
            .map(|(m, (g, a))| (m.step, g, a))
            .collect()
    }
}

/// A finished run: its record, final checkpoint (with optimizer state) and
/// the checkpoint at the cooldown start if the run passed through it.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
    pub boundary: Option<Checkpoint>,
}

/// Token-weighted mean cross-entropy over `batches`.
pub fn mean_loss(exec: Exec, weights: &WeightVector<f32>, cfg: &ModelConfig, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Empty("evaluation batches".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        total += row_losses(exec, weights, cfg, b)?.iter().sum::<f64>();
        tokens += b.rows() * b.seq_len();
    }
    Ok(total / tokens as f64)
}

/// [`mean_loss`] on the dataset's fixed validation subset.
pub fn validation_loss(exec: Exec, weights: &WeightVector<f32>, cfg: &ModelConfig, data: &Dataset) -> Result<f64> {
    mean_loss(exec, weights, cfg, data.val_batches())
}

/// Softmax predictions on the first `max_tokens` validation positions.
pub fn validation_predictions(
    exec: Exec,
    weights: &WeightVector<f32>,
    cfg: &ModelConfig,
    data: &Dataset,
    max_tokens: usize,
) -> Result<Predictions> {
    let v = cfg.vocab_size;
    let mut probs = Vec::new();
    'outer: for b in data.val_batches() {
        let logits = forward_with(exec, weights, cfg, b)?;
        for row in logits.values.chunks(v) {
            if probs.len() / v >= max_tokens {
                break 'outer;
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
            let e: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
            let z: f64 = e.iter().sum();
            probs.extend(e.into_iter().map(|x| x / z));
        }
    }
    if probs.is_empty() {
        return Err(Error::Empty("validation subset".into()));
    }
    Predictions::new(probs.len() / v, v, probs)
}

fn concat_batches(data: &Dataset, indices: &[usize]) -> Result<Batch> {
    if let [i] = indices {
        return data.batch(*i);
    }
    let parts = indices.iter().map(|&i| data.batch(i)).collect::<Result<Vec<_>>>()?;
    let rows = parts.iter().map(Batch::rows).sum();
    let tokens = parts.iter().flat_map(|b| b.tokens().iter().copied()).collect();
    Batch::new(rows, parts[0].seq_len(), tokens)
}

/// The batches the first `steps` updates of a run with `cfg` train on.
pub fn step_batches(cfg: &RunConfig, data: &Dataset, steps: usize) -> Result<Vec<Batch>> {
    let order = cfg.data.order(steps);
    order
        .chunks(cfg.data.batches_per_step)
        .map(|c| concat_batches(data, c))
        .collect()
}

fn check_data(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let dc = data.config();
    if dc.seq_len != cfg.model.seq_len {
        return Err(Error::Config(format!(
            "data seq_len {} differs from model seq_len {}",
            dc.seq_len, cfg.model.seq_len
        )));
    }
    if cfg.data.start + cfg.data.len > data.n_batches() {
        return Err(Error::Config(format!(
            "data portion {}..{} exceeds {} training batches",
            cfg.data.start,
            cfg.data.start + cfg.data.len,
            data.n_batches()
        )));
    }
    Ok(())
}

fn run_from(
    cfg: &RunConfig,
    data: &Dataset,
    mut weights: WeightVector<f32>,
    state: OptimizerState<f32>,
    start: u64,
) -> Result<RunOutput> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let clock = Instant::now();
    let end = cfg.end_step();
    if end < start {
        return Err(Error::Config(format!("run ends at step {end}, before its start {start}")));
    }
    let steps = (end - start) as usize;
    let order = cfg.data.order(steps);
    let mut opt = AdamW {
        config: cfg.effective_optimizer(),
        state,
    };
    let boundary_step = cfg.schedule.cooldown_start();
    let mut boundary = (start == boundary_step && steps > 0)
        .then(|| Checkpoint::new(cfg.model, start, weights.clone(), Some(opt.state.clone())));
    let mut metrics = Vec::with_capacity(steps);
    let mut status = RunStatus::Completed;
    let mut last = start;
    for (i, idx) in order.chunks(cfg.data.batches_per_step).enumerate() {
        let step = start + 1 + i as u64;
        let lr = cfg.schedule.lr_at(step)?;
        let batch = concat_batches(data, idx)?;
        let (loss, mut grads) = loss_and_gradients(cfg.exec, &weights, &cfg.model, &batch, 1.0)?;
        if !loss.is_finite() || !grads.is_finite() {
            status = RunStatus::Diverged {
                step,
                message: format!("non-finite loss {loss} or gradient"),
            };
            break;
        }
        let alignment = if opt.state.step_count > 0 {
            momentum_alignment(&opt.state, &grads)?.weighted_mean
        } else {
            None
        };
        let grad_norm = match opt.config.clip_norm {
            Some(c) => clip_gradients(&mut grads, c),
            None => global_norm(&grads),
        };
        let before = weights.clone();
        if let Err(e) = crate::optimizer::adamw_step(&mut weights, &grads, &mut opt.state, lr, &opt.config) {
            weights = before;
            status = RunStatus::Diverged {
                step,
                message: e.to_string(),
            };
            break;
        }
        if !weights.is_finite() {
            weights = before;
            status = RunStatus::Diverged {
                step,
                message: "non-finite weights after update".into(),
            };
            break;
        }
        last = step;
        let eval = step == end || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let val_loss = if eval {
            Some(validation_loss(cfg.exec, &weights, &cfg.model, data)?)
        } else {
            None
        };
        metrics.push(MetricRow {
            step,
            lr,
            train_loss: loss,
            grad_norm,
            alignment,
            val_loss,
            val_perplexity: val_loss.map(f64::exp),
        });
        if step == boundary_step && step != end {
            boundary = Some(Checkpoint::new(cfg.model, step, weights.clone(), Some(opt.state.clone())));
        }
    }
    let final_val_loss = match metrics.last() {
        Some(MetricRow { val_loss: Some(v), .. }) if last == end => *v,
        _ => validation_loss(cfg.exec, &weights, &cfg.model, data)?,
    };
    let checkpoint = Checkpoint::new(cfg.model, last, weights, Some(opt.state));
    let record = RunRecord {
        config: cfg.clone(),
        start_step: start,
        metrics,
        final_val_loss,
        final_checkpoint: checkpoint.content_id(),
        order,
        status,
        wall_seconds: clock.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        record,
        checkpoint,
        boundary,
    })
}

/// Train from a fresh initialisation seeded by `cfg.seed`.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<RunOutput> {
    cfg.model.validate()?;
    let weights = WeightVector::<f32>::init(&cfg.model, cfg.seed);
    let state = OptimizerState::for_weights(&weights);
    run_from(cfg, data, weights, state, 0)
}

/// Continue `pre` under `cfg` (typically a cooldown of some shape) with
/// the batch order given by `order_seed`.
pub fn resume_cooldown(pre: &Checkpoint, cfg: &RunConfig, order_seed: u64, data: &Dataset) -> Result<RunOutput> {
    if pre.config != cfg.model {
        return Err(Error::Config("run model config differs from the checkpoint's".into()));
    }
    let state = match (&pre.optimizer, cfg.flags.reset_optimizer) {
        (_, true) => OptimizerState::for_weights(&pre.weights),
        (Some(s), false) => s.clone(),
        (None, false) => {
            return Err(Error::Config(
                "checkpoint has no optimizer state; set reset_optimizer to resume".into(),
            ))
        }
    };
    let mut cfg = cfg.clone();
    cfg.data.order_seed = order_seed;
    cfg.resume_from = Some(pre.content_id());
    run_from(&cfg, data, pre.weights.clone(), state, pre.step)
}

/// The same run with the cooldown replaced by constant lr for the same
/// number of steps.
pub fn constant_control(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        schedule: cfg.schedule.constant_continuation(),
        ..cfg.clone()
    }
}

/// One cell of a sweep. Failed cells keep their error message.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub shape: CooldownShape,
    pub seed: u64,
    pub outcome: std::result::Result<RunOutput, String>,
}

impl SweepCell {
    pub fn output(&self) -> Option<&RunOutput> {
        self.outcome.as_ref().ok().filter(|o| o.record.completed())
    }
}

/// Every `(shape, seed)` cooldown from `pre`, shape-major. Cells run
/// through `exec`; a failing cell is recorded and the sweep goes on.
pub fn permutation_sweep(
    exec: Exec,
    pre: &Checkpoint,
    cfg: &RunConfig,
    shapes: &[CooldownShape],
    seeds: &[u64],
    data: &Dataset,
) -> Result<Vec<SweepCell>> {
    if seeds.len() < 2 {
        return Err(Error::TooFewMembers {
            need: 2,
            got: seeds.len(),
        });
    }
    let cells: Vec<(CooldownShape, u64)> = shapes.iter().flat_map(|&s| seeds.iter().map(move |&n| (s, n))).collect();
    Ok(exec.map_slice(&cells, |&(shape, seed)| {
        let run = RunConfig {
            schedule: cfg.schedule.with_shape(shape),
            ..cfg.clone()
        };
        let outcome = resume_cooldown(pre, &run, seed, data)
            .map_err(|e| e.to_string())
            .and_then(|o| match &o.record.status {
                RunStatus::Completed => Ok(o),
                RunStatus::Diverged { message, .. } => Err(message.clone()),
            });
        SweepCell { shape, seed, outcome }
    }))
}

/// The reference-run config for a sweep config: sqrt shape and a cooldown
/// `factor` times longer over the same data portion, which the order then
/// repeats.
pub fn reference_config(cfg: &RunConfig, factor: u64) -> Result<RunConfig> {
    if factor < 2 {
        return Err(Error::Domain {
            value: factor as f64,
            domain: "reference factor >= 2",
        });
    }
    let mut schedule = cfg.schedule.with_shape(CooldownShape::Sqrt);
    schedule.cooldown_steps *= factor;
    Ok(RunConfig {
        schedule,
        stop_at: None,
        ..cfg.clone()
    })
}

/// Long sqrt cooldowns from `pre`, one per seed.
pub fn train_reference(
    exec: Exec,
    pre: &Checkpoint,
    long_cfg: &RunConfig,
    sweep_total_steps: u64,
    seeds: &[u64],
    data: &Dataset,
) -> Result<Vec<RunOutput>> {
    if long_cfg.schedule.shape != CooldownShape::Sqrt {
        return Err(Error::Config("reference runs use the sqrt cooldown".into()));
    }
    if long_cfg.end_step() <= sweep_total_steps {
        return Err(Error::Config(format!(
            "reference runs end at step {}, not after the sweep's {sweep_total_steps}",
            long_cfg.end_step()
        )));
    }
    exec.map_slice(seeds, |&s| resume_cooldown(pre, long_cfg, s, data))
        .into_iter()
        .collect()
}

/// Cooldowns of one shape on `parts` disjoint consecutive data portions,
/// each `cfg.data.len` batches long, for souping.
pub fn disjoint_cooldowns(
    exec: Exec,
    pre: &Checkpoint,
    cfg: &RunConfig,
    parts: usize,
    data: &Dataset,
) -> Result<Vec<RunOutput>> {
    exec.map(parts, |p| {
        let mut run = cfg.clone();
        run.data.start = cfg.data.start + p * cfg.data.len;
        resume_cooldown(pre, &run, cfg.data.order_seed, data)
    })
    .into_iter()
    .collect()
}

/// A single cooldown over all `parts` portions, `parts` times longer; the
/// comparison point for a soup of [`disjoint_cooldowns`].
pub fn long_comparison_config(cfg: &RunConfig, parts: usize) -> RunConfig {
    let mut run = cfg.clone();
    run.schedule.cooldown_steps *= parts as u64;
    run.data.len *= parts;
    run.stop_at = None;
    run
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_text, ByteTokenizer, DataConfig, TokenCorpus};

    fn tiny() -> (RunConfig, Dataset) {
        let model = ModelConfig {
            d_model: 16,
            n_layers: 1,
            ffw_dim: 32,
            head_dim: 8,
            n_heads: 2,
            vocab_size: 256,
            seq_len: 16,
        };
        let corpus = TokenCorpus::from_text(&synthetic_text(1, 40_000), &ByteTokenizer).unwrap();
        let data = Dataset::new(
            corpus,
            DataConfig {
                batch_size: 4,
                seq_len: 16,
                val_fraction: 0.1,
                val_rows: 16,
            },
        )
        .unwrap();
        let cfg = RunConfig {
            model,
            schedule: ScheduleSpec::wsd(3e-3, 4, 16, 10, CooldownShape::Linear).unwrap(),
            optimizer: OptimizerConfig::default(),
            data: DataSpec::new(0, 20, 0),
            resume_from: None,
            flags: RunFlags::default(),
            eval_every: 5,
            seed: 3,
            stop_at: Some(20),
            exec: Exec::Sequential,
        };
        (cfg, data)
    }

    #[test]
    fn zero_steps_returns_init() {
        let (mut cfg, data) = tiny();
        cfg.stop_at = Some(0);
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.checkpoint.weights, WeightVector::init(&cfg.model, 3));
        assert!(out.record.metrics.is_empty());
    }

    #[test]
    fn metric_log_matches_schedule() {
        let (cfg, data) = tiny();
        let out = train(&cfg, &data).unwrap();
        let steps: Vec<u64> = out.record.metrics.iter().map(|m| m.step).collect();
        assert_eq!(steps, (1..=20).collect::<Vec<_>>());
        for m in &out.record.metrics {
            assert_eq!(m.lr, cfg.schedule.lr_at(m.step).unwrap());
            assert_eq!(m.val_loss.is_some(), m.step % 5 == 0);
        }
        assert!(out.record.metrics[1..].iter().all(|m| m.alignment.is_some()));
        assert_eq!(out.checkpoint.step, 20);
        let parsed = RunRecord::parse_metrics_jsonl(&out.record.metrics_jsonl()).unwrap();
        assert_eq!(parsed, out.record.metrics);
    }

    #[test]
    fn full_run_keeps_boundary_checkpoint() {
        let (mut cfg, data) = tiny();
        cfg.stop_at = None;
        cfg.data.len = 30;
        let full = train(&cfg, &data).unwrap();
        let b = full.boundary.expect("passes the cooldown start");
        assert_eq!(b.step, 20);
        cfg.stop_at = Some(20);
        let base = train(&cfg, &data).unwrap();
        assert_eq!(base.checkpoint, b);
    }

    #[test]
    fn resume_with_no_steps_is_identity() {
        let (cfg, data) = tiny();
        let base = train(&cfg, &data).unwrap();
        let mut cd = cfg.clone();
        cd.stop_at = Some(20);
        let out = resume_cooldown(&base.checkpoint, &cd, 9, &data).unwrap();
        assert_eq!(out.checkpoint.weights, base.checkpoint.weights);
    }

    #[test]
    fn resume_checks_model_config() {
        let (cfg, data) = tiny();
        let base = train(&cfg, &data).unwrap();
        let mut other = cfg.clone();
        other.model.ffw_dim = 48;
        other.stop_at = None;
        assert!(matches!(resume_cooldown(&base.checkpoint, &other, 1, &data), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_shape_and_seeds() {
        let (cfg, data) = tiny();
        let base = train(&cfg, &data).unwrap();
        let mut cd = cfg.clone();
        cd.stop_at = None;
        cd.data = DataSpec::new(20, 10, 0);
        let shapes = [CooldownShape::Linear, CooldownShape::Sqrt];
        let cells = permutation_sweep(Exec::Parallel, &base.checkpoint, &cd, &shapes, &[1, 2, 3], &data).unwrap();
        assert_eq!(cells.len(), 6);
        let mut multisets = cells.iter().map(|c| {
            let mut o = c.output().unwrap().record.order.clone();
            o.sort();
            o
        });
        let first = multisets.next().unwrap();
        assert!(multisets.all(|m| m == first));
        let a = &cells[0].output().unwrap().checkpoint.weights;
        let b = &cells[1].output().unwrap().checkpoint.weights;
        assert!(a.sub(b).unwrap().norm() > 0.0);
        assert!(permutation_sweep(Exec::Sequential, &base.checkpoint, &cd, &shapes, &[1], &data).is_err());
    }

    #[test]
    fn failed_cells_do_not_abort_the_sweep() {
        let (cfg, data) = tiny();
        let base = train(&cfg, &data).unwrap();
        let mut cd = cfg.clone();
        cd.stop_at = None;
        cd.data = DataSpec::new(20, 10, 0);
        cd.schedule.peak_lr = 1e30;
        let cells = permutation_sweep(Exec::Sequential, &base.checkpoint, &cd, &[CooldownShape::Linear], &[1, 2], &data).unwrap();
        assert_eq!(cells.len(), 2);
        assert!(cells.iter().all(|c| c.outcome.is_err()));
    }

    #[test]
    fn reference_runs() {
        let (cfg, data) = tiny();
        let base = train(&cfg, &data).unwrap();
        let mut cd = cfg.clone();
        cd.stop_at = None;
        cd.data = DataSpec::new(20, 10, 0);
        let long = reference_config(&cd, 2).unwrap();
        assert_eq!(long.end_step(), 40);
        let refs = train_reference(Exec::Sequential, &base.checkpoint, &long, 30, &[4, 5], &data).unwrap();
        assert_eq!(refs[0].record.order.len(), 20);
        assert_ne!(refs[0].checkpoint.weights, refs[1].checkpoint.weights);
        let again = train_reference(Exec::Sequential, &base.checkpoint, &long, 30, &[4, 5], &data).unwrap();
        assert_eq!(again[0].checkpoint, refs[0].checkpoint);
        assert!(train_reference(Exec::Sequential, &base.checkpoint, &cd, 30, &[4], &data).is_err());
    }

    #[test]
    fn reset_flag_matches_fresh_first_step() {
        let (cfg, data) = tiny();
        let base = train(&cfg, &data).unwrap();
        let mut cd = cfg.clone();
        cd.stop_at = Some(21);
        cd.flags.reset_optimizer = true;
        cd.data = DataSpec::new(20, 10, 0);
        let out = resume_cooldown(&base.checkpoint, &cd, 7, &data).unwrap();
        let mut w = base.checkpoint.weights.clone();
        let mut opt = AdamW::new(cfg.optimizer, w.layout().clone());
        let batch = data.batch(out.record.order[0]).unwrap();
        let g = crate::model::gradients(&w, &cfg.model, &batch).unwrap();
        opt.step(&mut w, g, cfg.schedule.lr_at(21).unwrap()).unwrap();
        assert_eq!(out.checkpoint.weights, w);
        assert_eq!(out.checkpoint.optimizer.unwrap().step_count, 1);
    }

    #[test]
    fn batches_per_step_concatenates() {
        let (mut cfg, data) = tiny();
        cfg.data.batches_per_step = 2;
        cfg.stop_at = Some(5);
        let out = train(&cfg, &data).unwrap();
        assert_eq!(out.record.order.len(), 10);
        let batches = step_batches(&cfg, &data, 5).unwrap();
        assert_eq!(batches[0].rows(), 8);
    }

    #[test]
    fn predictions_are_distributions() {
        let (cfg, data) = tiny();
        let w = WeightVector::init(&cfg.model, 1);
        let p = validation_predictions(Exec::Sequential, &w, &cfg.model, &data, 40).unwrap();
        assert_eq!(p.tokens, 40);
        for row in p.probs.chunks(p.vocab) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
