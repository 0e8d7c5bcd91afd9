//! Stage runner for a manifest.
//!
//! Stages are cached by a key over their inputs and the keys of the stages
//! they read from. Re-running a manifest whose stages are all fresh trains
//! nothing. Data portions, in training batches of the dataset:
//!
//! ```text
//! base       [0, P)                     P = warmup + stable
//! cooldowns  [P, P + C)                 every sweep, reference and control run
//! soup part  [P + i*C, P + (i+1)*C)     i < parts
//! ```

use std::collections::{BTreeMap, BTreeSet};

use anyhow::{anyhow, bail, Context, Result};
use cooldown_lab::analysis::{
    average_weights, bias_variance_kl_space, bias_variance_loss_simple, bias_variance_loss_space,
    bias_variance_weight_space, shift_deviation, ExperimentSet, LossSpaceReport, ShiftWindow, Space,
};
use cooldown_lab::data::{retrospective_eval, DataConfig, Dataset};
use cooldown_lab::landscape::{adam_steps_direction, global_direction, scan_grid, GridSpec, LandscapeGrid};
use cooldown_lab::model::{train_probe, Batch, Checkpoint, WeightVector};
use cooldown_lab::schedules::{CooldownShape, ScheduleSpec};
use cooldown_lab::trainer::{
    constant_control, disjoint_cooldowns, long_comparison_config, permutation_sweep, reference_config, resume_cooldown,
    train, train_reference, validation_loss, validation_predictions, DataSpec, RunConfig, RunFlags,
};
use cooldown_lab::Exec;
use serde::Serialize;

use crate::artifacts::{stage_key, StageState, StageStatus, Store, StoredRun};
use crate::manifest::{At, BetaVary, Manifest};
use crate::tables::*;

/// What happened to one stage in this invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: String,
    pub cached: bool,
    pub state: StageState,
    pub errors: Vec<String>,
}

struct StageResult {
    outputs: Vec<String>,
    errors: Vec<String>,
}

impl StageResult {
    fn ok(outputs: Vec<String>) -> Self {
        StageResult {
            outputs,
            errors: Vec::new(),
        }
    }
}

/// Directory-safe form of a shape, e.g. `lowered_linear-0.7`.
pub fn shape_slug(shape: &CooldownShape) -> String {
    shape.to_string().replace(':', "-")
}

pub struct Pipeline {
    pub manifest: Manifest,
    pub store: Store,
    pub exec: Exec,
    data: Dataset,
    corpus_digest: String,
    reports: Vec<StageReport>,
}

impl Pipeline {
    /// Load the corpus and open (or create) the artifact directory.
    pub fn open(manifest: Manifest, dir: &std::path::Path, exec: Exec) -> Result<Pipeline> {
        manifest.validate()?;
        let corpus = manifest.load_corpus()?;
        let corpus_digest = corpus.source_digest.clone();
        let data = Dataset::new(corpus, manifest.data)?;
        if data.val_batches().is_empty() {
            bail!("the validation split holds no complete row; enlarge the corpus or val_fraction");
        }
        let mut store = Store::open(dir)?;
        store.write("manifest.toml", manifest.to_toml().as_bytes())?;
        store.flush()?;
        Ok(Pipeline {
            manifest,
            store,
            exec,
            data,
            corpus_digest,
            reports: Vec::new(),
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn reports(&self) -> &[StageReport] {
        &self.reports
    }

    /// True when every stage touched so far finished without failures.
    pub fn all_ok(&self) -> bool {
        self.reports.iter().all(|r| r.state == StageState::Done)
    }

    fn run_stage(&mut self, name: &str, key: String, f: impl FnOnce(&mut Self) -> Result<StageResult>) -> Result<()> {
        if self.store.is_fresh(name, &key) {
            let st = self.store.stage_status(name).cloned().expect("fresh stage has a status");
            if !self.reports.iter().any(|r| r.stage == name) {
                self.reports.push(StageReport {
                    stage: name.to_string(),
                    cached: true,
                    state: st.state,
                    errors: st.errors,
                });
            }
            return Ok(());
        }
        let result = f(self);
        let (status, out) = match result {
            Ok(r) => {
                let state = if r.errors.is_empty() { StageState::Done } else { StageState::Partial };
                (
                    StageStatus {
                        key,
                        state,
                        outputs: r.outputs,
                        errors: r.errors,
                    },
                    Ok(()),
                )
            }
            Err(e) => (
                StageStatus {
                    key,
                    state: StageState::Failed,
                    outputs: Vec::new(),
                    errors: vec![format!("{e:#}")],
                },
                Err(e.context(format!("stage `{name}` failed"))),
            ),
        };
        self.reports.retain(|r| r.stage != name);
        self.reports.push(StageReport {
            stage: name.to_string(),
            cached: false,
            state: status.state,
            errors: status.errors.clone(),
        });
        self.store.set_status(name, status)?;
        out
    }

    fn key_of(&self, stage: &str) -> Result<String> {
        self.store
            .stage_status(stage)
            .map(|s| s.key.clone())
            .ok_or_else(|| anyhow!("stage `{stage}` has no status"))
    }

    // ---- configs ------------------------------------------------------

    fn cooldown_len(&self) -> usize {
        self.manifest.schedule.cooldown_steps as usize
    }

    /// The base (pre-cooldown) run: steps `1..=P` over `[0, P)`.
    pub fn base_config(&self) -> RunConfig {
        let m = &self.manifest;
        RunConfig {
            model: m.model,
            schedule: m.schedule,
            optimizer: m.optimizer,
            data: DataSpec::new(0, m.pre_steps() as usize, m.base.order_seed),
            resume_from: None,
            flags: RunFlags::default(),
            eval_every: m.base.eval_every,
            seed: m.base.init_seed,
            stop_at: Some(m.pre_steps()),
            exec: self.exec,
        }
    }

    /// A cooldown of `shape` from the base checkpoint over `[P, P + C)`.
    pub fn cooldown_config(&self, shape: CooldownShape) -> RunConfig {
        let mut cfg = self.base_config();
        cfg.schedule = self.manifest.schedule.with_shape(shape);
        cfg.data = DataSpec::new(self.manifest.pre_steps() as usize, self.cooldown_len(), 0);
        cfg.stop_at = None;
        cfg
    }

    // ---- stages -------------------------------------------------------

    fn base_key(&self) -> String {
        let m = &self.manifest;
        stage_key(&("base", &self.corpus_digest, m.data, m.model, m.optimizer, m.schedule, m.base))
    }

    pub fn base(&mut self) -> Result<StoredRun> {
        let key = self.base_key();
        self.run_stage("base", key, |p| {
            let out = train(&p.base_config(), &p.data)?;
            if !out.record.completed() {
                bail!("base run did not complete: {:?}", out.record.status);
            }
            Ok(StageResult::ok(p.store.save_run("runs/base", &out)?))
        })?;
        self.store.load_run("runs/base")
    }

    /// One cooldown of `shape` with batch order `seed`, stored under
    /// `runs/cooldown/<shape>/seed-<seed>`.
    pub fn cooldown(&mut self, shape: CooldownShape, seed: u64) -> Result<StoredRun> {
        let pre = self.base()?;
        let dir = format!("runs/cooldown/{}/seed-{seed}", shape_slug(&shape));
        let key = stage_key(&("cooldown", self.key_of("base")?, shape, seed));
        let stage = format!("cooldown:{}:{seed}", shape_slug(&shape));
        let d = dir.clone();
        self.run_stage(&stage, key, move |p| {
            let out = resume_cooldown(&pre.checkpoint, &p.cooldown_config(shape), seed, &p.data)?;
            Ok(StageResult::ok(p.store.save_run(&d, &out)?))
        })?;
        self.store.load_run(&dir)
    }

    pub fn control(&mut self) -> Result<Vec<ControlRow>> {
        let Some(spec) = self.manifest.control.clone() else {
            bail!("manifest has no [control] section");
        };
        let pre = self.base()?;
        let key = stage_key(&("control", self.key_of("base")?, &spec));
        self.run_stage("control", key, |p| {
            let cfg = p.cooldown_config(p.manifest.schedule.shape);
            let constant = constant_control(&cfg);
            let (data, exec) = (&p.data, p.exec);
            let runs = exec.map(spec.seeds.len() * 2, |i| {
                let c = if i % 2 == 0 { &cfg } else { &constant };
                resume_cooldown(&pre.checkpoint, c, spec.seeds[i / 2], data)
            });
            let mut outputs = Vec::new();
            let mut rows = Vec::new();
            for (pair, seed) in runs.chunks(2).zip(&spec.seeds) {
                let (cd, ct) = match (&pair[0], &pair[1]) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(e), _) | (_, Err(e)) => bail!("control seed {seed}: {e}"),
                };
                outputs.extend(p.store.save_run(&format!("runs/control/seed-{seed}/cooldown"), cd)?);
                outputs.extend(p.store.save_run(&format!("runs/control/seed-{seed}/constant"), ct)?);
                rows.push(ControlRow {
                    seed: *seed,
                    cooldown_loss: cd.record.final_val_loss,
                    constant_loss: ct.record.final_val_loss,
                    margin: ct.record.final_val_loss - cd.record.final_val_loss,
                });
            }
            outputs.push(p.store.write("analysis/control.csv", &to_csv(&rows)?)?);
            Ok(StageResult::ok(outputs))
        })?;
        read_csv(&self.store.path("analysis/control.csv"))
    }

    pub fn sweep(&mut self) -> Result<()> {
        let Some(spec) = self.manifest.sweep.clone() else {
            bail!("manifest has no [sweep] section");
        };
        let pre = self.base()?;
        let key = stage_key(&("sweep", self.key_of("base")?, &spec));
        self.run_stage("sweep", key, |p| {
            let shapes = spec.all_shapes()?;
            let cfg = p.cooldown_config(p.manifest.schedule.shape);
            let cells = permutation_sweep(p.exec, &pre.checkpoint, &cfg, &shapes, &spec.seeds, &p.data)?;
            let mut res = StageResult::ok(Vec::new());
            for c in &cells {
                match &c.outcome {
                    Ok(out) => {
                        let dir = format!("runs/sweep/{}/seed-{}", shape_slug(&c.shape), c.seed);
                        res.outputs.extend(p.store.save_run(&dir, out)?);
                    }
                    Err(e) => res.errors.push(format!("{} seed {}: {e}", c.shape, c.seed)),
                }
            }
            Ok(res)
        })
    }

    /// Completed sweep runs grouped by shape, in sweep order.
    pub fn sweep_runs(&mut self) -> Result<Vec<(CooldownShape, Vec<StoredRun>)>> {
        self.sweep()?;
        let spec = self.manifest.sweep.clone().expect("checked by sweep()");
        let mut out = Vec::new();
        for shape in spec.all_shapes()? {
            let mut runs = Vec::new();
            for seed in &spec.seeds {
                let dir = format!("runs/sweep/{}/seed-{seed}", shape_slug(&shape));
                if self.store.exists(&format!("{dir}/record.json")) {
                    runs.push(self.store.load_run(&dir)?);
                }
            }
            out.push((shape, runs));
        }
        Ok(out)
    }

    pub fn reference(&mut self) -> Result<Vec<StoredRun>> {
        let Some(spec) = self.manifest.reference.clone() else {
            bail!("manifest has no [reference] section");
        };
        let pre = self.base()?;
        let key = stage_key(&("reference", self.key_of("base")?, &spec));
        self.run_stage("reference", key, |p| {
            let cfg = p.cooldown_config(p.manifest.schedule.shape);
            let long = reference_config(&cfg, spec.factor)?;
            let runs = train_reference(p.exec, &pre.checkpoint, &long, cfg.end_step(), &spec.seeds, &p.data)?;
            let mut res = StageResult::ok(Vec::new());
            for (r, seed) in runs.iter().zip(&spec.seeds) {
                if !r.record.completed() {
                    res.errors.push(format!("reference seed {seed}: {:?}", r.record.status));
                }
                res.outputs.extend(p.store.save_run(&format!("runs/reference/seed-{seed}"), r)?);
            }
            Ok(res)
        })?;
        spec.seeds
            .iter()
            .map(|s| self.store.load_run(&format!("runs/reference/seed-{s}")))
            .collect()
    }

    pub fn soup(&mut self) -> Result<Vec<SoupRow>> {
        let Some(spec) = self.manifest.soup.clone() else {
            bail!("manifest has no [soup] section");
        };
        let pre = self.base()?;
        let key = stage_key(&("soup", self.key_of("base")?, &spec));
        self.run_stage("soup", key, |p| {
            let mut outputs = Vec::new();
            let mut rows = Vec::new();
            for shape in &spec.shapes {
                let mut cfg = p.cooldown_config(*shape);
                cfg.data.order_seed = spec.order_seed;
                let members = disjoint_cooldowns(p.exec, &pre.checkpoint, &cfg, spec.parts, &p.data)?;
                let slug = shape_slug(shape);
                for (i, m) in members.iter().enumerate() {
                    if !m.record.completed() {
                        bail!("soup {shape} part {i} diverged");
                    }
                    outputs.extend(p.store.save_run(&format!("runs/soup/{slug}/part-{i}"), m)?);
                }
                let weights: Vec<&WeightVector> = members.iter().map(|m| &m.checkpoint.weights).collect();
                let soup = average_weights(&weights)?;
                let soup_loss = validation_loss(p.exec, &soup, &p.manifest.model, &p.data)?;
                let ck = Checkpoint::new(p.manifest.model, members[0].checkpoint.step, soup, None);
                let id = p.store.store_checkpoint(&ck)?;
                outputs.push(format!("checkpoints/{id}.ckpt"));
                let long_run_loss = if spec.long_run {
                    let long = long_comparison_config(&cfg, spec.parts);
                    let out = resume_cooldown(&pre.checkpoint, &long, spec.order_seed, &p.data)?;
                    outputs.extend(p.store.save_run(&format!("runs/soup/{slug}/long"), &out)?);
                    Some(out.record.final_val_loss)
                } else {
                    None
                };
                rows.push(SoupRow {
                    shape: shape.kind_name().into(),
                    alpha: shape.alpha(),
                    member_mean_loss: members.iter().map(|m| m.record.final_val_loss).sum::<f64>() / members.len() as f64,
                    soup_loss,
                    long_run_loss,
                });
            }
            outputs.push(p.store.write("analysis/soup.csv", &to_csv(&rows)?)?);
            Ok(StageResult::ok(outputs))
        })?;
        read_csv(&self.store.path("analysis/soup.csv"))
    }

    pub fn batch_sweep(&mut self) -> Result<Vec<BatchSweepRow>> {
        let Some(spec) = self.manifest.batch_sweep.clone() else {
            bail!("manifest has no [batch_sweep] section");
        };
        let pre = self.base()?;
        let key = stage_key(&("batch_sweep", self.key_of("base")?, &spec));
        self.run_stage("batch_sweep", key, |p| {
            let base = p.cooldown_config(spec.shape);
            let tokens_per_batch = p.data.tokens_per_batch() as u64;
            let cells: Vec<(u64, u64)> = spec.scales.iter().flat_map(|&k| spec.seeds.iter().map(move |&s| (k, s))).collect();
            let cfgs: Vec<Result<(RunConfig, bool)>> = cells
                .iter()
                .map(|&(k, _)| batch_sweep_config(&base, k, spec.match_half_life, spec.lr_rule.rule()))
                .collect();
            let (data, exec) = (&p.data, p.exec);
            let runs = exec.map(cells.len(), |i| match &cfgs[i] {
                Ok((cfg, _)) => resume_cooldown(&pre.checkpoint, cfg, cells[i].1, data).map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            });
            let mut res = StageResult::ok(Vec::new());
            let mut rows = Vec::new();
            for ((&(k, seed), cfg), run) in cells.iter().zip(&cfgs).zip(runs) {
                let (cfg, rounded) = match cfg {
                    Ok((c, r)) => (Some(c), *r),
                    Err(_) => (None, false),
                };
                let steps = cfg.map_or(0, |c| c.schedule.cooldown_steps);
                let mut row = BatchSweepRow {
                    k,
                    seed,
                    steps,
                    rounded,
                    tokens: steps * k * tokens_per_batch,
                    peak_lr: cfg.map_or(f64::NAN, |c| c.schedule.peak_lr),
                    beta1: cfg.map_or(f64::NAN, |c| c.optimizer.beta1),
                    beta2: cfg.map_or(f64::NAN, |c| c.optimizer.beta2),
                    final_val_loss: None,
                    error: None,
                };
                match run {
                    Ok(out) if out.record.completed() => {
                        row.final_val_loss = Some(out.record.final_val_loss);
                        res.outputs.extend(p.store.save_run(&format!("runs/batch_sweep/k-{k}/seed-{seed}"), &out)?);
                    }
                    Ok(out) => row.error = Some(format!("{:?}", out.record.status)),
                    Err(e) => row.error = Some(e),
                }
                if let Some(e) = &row.error {
                    res.errors.push(format!("k={k} seed {seed}: {e}"));
                }
                rows.push(row);
            }
            res.outputs.push(p.store.write("analysis/batch_sweep.csv", &to_csv(&rows)?)?);
            Ok(res)
        })?;
        read_csv(&self.store.path("analysis/batch_sweep.csv"))
    }

    pub fn beta_sweep(&mut self) -> Result<Vec<BetaSweepRow>> {
        let Some(spec) = self.manifest.beta_sweep.clone() else {
            bail!("manifest has no [beta_sweep] section");
        };
        let pre = self.base()?;
        let key = stage_key(&("beta_sweep", self.key_of("base")?, &spec));
        self.run_stage("beta_sweep", key, |p| {
            let base = p.cooldown_config(spec.shape);
            let cells: Vec<(f64, u64)> = spec.powers.iter().flat_map(|&q| spec.seeds.iter().map(move |&s| (q, s))).collect();
            let cfgs: Vec<RunConfig> = cells.iter().map(|&(q, _)| beta_sweep_config(&base, q, spec.vary)).collect();
            let (data, exec) = (&p.data, p.exec);
            let runs = exec.map(cells.len(), |i| resume_cooldown(&pre.checkpoint, &cfgs[i], cells[i].1, data));
            let vary = match spec.vary {
                BetaVary::Both => "both",
                BetaVary::Beta2Only => "beta2_only",
            };
            let mut res = StageResult::ok(Vec::new());
            let mut rows = Vec::new();
            for ((&(q, seed), cfg), run) in cells.iter().zip(&cfgs).zip(runs) {
                let mut row = BetaSweepRow {
                    p: q,
                    vary: vary.into(),
                    seed,
                    beta1: cfg.optimizer.beta1,
                    beta2: cfg.optimizer.beta2,
                    final_val_loss: None,
                    error: None,
                };
                match run {
                    Ok(out) if out.record.completed() => {
                        row.final_val_loss = Some(out.record.final_val_loss);
                        res.outputs.extend(p.store.save_run(&format!("runs/beta_sweep/p-{q}/seed-{seed}"), &out)?);
                    }
                    Ok(out) => row.error = Some(format!("{:?}", out.record.status)),
                    Err(e) => row.error = Some(e.to_string()),
                }
                if let Some(e) = &row.error {
                    res.errors.push(format!("p={q} seed {seed}: {e}"));
                }
                rows.push(row);
            }
            res.outputs.push(p.store.write("analysis/beta_sweep.csv", &to_csv(&rows)?)?);
            Ok(res)
        })?;
        read_csv(&self.store.path("analysis/beta_sweep.csv"))
    }

    /// Bias and variance per sweep shape in `space`.
    pub fn analyze(&mut self, space: Space) -> Result<Vec<BiasVarianceRow>> {
        let sweep = self.sweep_runs()?;
        let needs_refs = matches!(space, Space::Loss | Space::Weight | Space::Kl);
        let refs = if needs_refs { self.reference()? } else { Vec::new() };
        let mut upstream = vec![self.key_of("sweep")?];
        if needs_refs {
            upstream.push(self.key_of("reference")?);
        }
        let kl_tokens = self.manifest.analysis.kl_tokens;
        let key = stage_key(&("analysis", space, upstream, kl_tokens));
        let rel = format!("analysis/bias_variance_{space}.csv");
        self.run_stage(&format!("analysis:{space}"), key, |p| {
            let model = p.manifest.model;
            let (data, exec) = (&p.data, p.exec);
            let ref_weights: Vec<WeightVector> = refs.iter().map(|r| r.checkpoint.weights.clone()).collect();
            let ref_preds = if space == Space::Kl {
                ref_weights
                    .iter()
                    .map(|w| validation_predictions(exec, w, &model, data, kl_tokens))
                    .collect::<cooldown_lab::Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let mut rows = Vec::new();
            let mut details = BTreeMap::new();
            let mut res = StageResult::ok(Vec::new());
            for (shape, runs) in &sweep {
                let members: Vec<WeightVector> = runs.iter().map(|r| r.checkpoint.weights.clone()).collect();
                let losses: Vec<f64> = runs.iter().map(|r| r.record.final_val_loss).collect();
                let outcome: Result<(f64, f64, Option<f64>)> = (|| match space {
                    Space::Loss => {
                        let exp = ExperimentSet {
                            shape: *shape,
                            members: members.clone(),
                            losses: losses.clone(),
                            predictions: None,
                        };
                        let eval = |w: &WeightVector| validation_loss(exec, w, &model, data);
                        let r: LossSpaceReport = bias_variance_loss_space(&exp, &ref_weights, &eval)?;
                        details.insert(shape.to_string(), serde_json::to_value(r)?);
                        Ok((r.bias, r.variance, Some(r.residual)))
                    }
                    Space::Weight => {
                        let (b, v) = bias_variance_weight_space(&members, &ref_weights)?;
                        Ok((b, v, None))
                    }
                    Space::LossSimple => {
                        let (b, v) = bias_variance_loss_simple(&losses)?;
                        Ok((b, v, None))
                    }
                    Space::Kl => {
                        let preds = members
                            .iter()
                            .map(|w| validation_predictions(exec, w, &model, data, kl_tokens))
                            .collect::<cooldown_lab::Result<Vec<_>>>()?;
                        let (b, v) = bias_variance_kl_space(&preds, &ref_preds)?;
                        Ok((b, v, None))
                    }
                })();
                match outcome {
                    Ok((bias, variance, residual)) => rows.push(BiasVarianceRow {
                        shape: shape.kind_name().into(),
                        alpha: shape.alpha(),
                        bias,
                        variance,
                        residual,
                    }),
                    Err(e) => res.errors.push(format!("{shape}: {e:#}")),
                }
            }
            res.outputs.push(p.store.write(&rel, &to_csv(&rows)?)?);
            if !details.is_empty() {
                let json = serde_json::to_vec_pretty(&details)?;
                res.outputs.push(p.store.write(&format!("analysis/bias_variance_{space}.json"), &json)?);
            }
            Ok(res)
        })?;
        read_csv(&self.store.path(&rel))
    }

    /// Per-shape shift and deviation (cooldown window), averaged over the
    /// sweep seeds. The all-batch variant is written alongside.
    pub fn shift(&mut self) -> Result<Vec<ShiftRow>> {
        let pre = self.base()?;
        let sweep = self.sweep_runs()?;
        let key = stage_key(&("shift", self.key_of("base")?, self.key_of("sweep")?));
        self.run_stage("shift_deviation", key, |p| {
            let model = p.manifest.model;
            let cut = pre.record.order.len();
            let mut indices: BTreeSet<usize> = pre.record.order.iter().copied().collect();
            for (_, runs) in &sweep {
                for r in runs {
                    indices.extend(r.record.order.iter().copied());
                }
            }
            let indices: Vec<usize> = indices.into_iter().collect();
            let pre_ppl = retrospective_eval(p.exec, &pre.checkpoint.weights, &model, &p.data, &indices)?;
            let pre_of: BTreeMap<usize, f64> = indices.iter().copied().zip(pre_ppl).collect();
            let mut rows = Vec::new();
            let mut rows_all = Vec::new();
            let mut outputs = Vec::new();
            for (shape, runs) in &sweep {
                if runs.is_empty() {
                    continue;
                }
                let (mut s, mut d, mut s_all, mut d_all) = (0.0, 0.0, 0.0, 0.0);
                let mut post_sum: Vec<f64> = Vec::new();
                let mut pre_series: Vec<f64> = Vec::new();
                for r in runs {
                    let order: Vec<usize> = pre.record.order.iter().chain(&r.record.order).copied().collect();
                    pre_series = order.iter().map(|i| pre_of[i]).collect();
                    let post = retrospective_eval(p.exec, &r.checkpoint.weights, &model, &p.data, &order)?;
                    let c = shift_deviation(&pre_series, &post, cut, ShiftWindow::Cooldown)?;
                    let a = shift_deviation(&pre_series, &post, cut, ShiftWindow::All)?;
                    s += c.shift;
                    d += c.deviation;
                    s_all += a.shift;
                    d_all += a.deviation;
                    if post_sum.is_empty() {
                        post_sum = post;
                    } else {
                        post_sum.iter_mut().zip(&post).for_each(|(x, y)| *x += y);
                    }
                }
                let n = runs.len() as f64;
                rows.push(ShiftRow {
                    shape: shape.kind_name().into(),
                    alpha: shape.alpha(),
                    shift: s / n,
                    deviation: d / n,
                });
                rows_all.push(ShiftRow {
                    shape: shape.kind_name().into(),
                    alpha: shape.alpha(),
                    shift: s_all / n,
                    deviation: d_all / n,
                });
                // Pre-cooldown part of the order is shared; the cooldown part
                // differs per seed, so the curve is per position, not batch.
                let retro: Vec<RetroRow> = pre_series
                    .iter()
                    .zip(&post_sum)
                    .enumerate()
                    .map(|(i, (a, b))| RetroRow {
                        batch_index: i,
                        pre_perplexity: *a,
                        post_perplexity: b / n,
                    })
                    .collect();
                outputs.push(p.store.write(&format!("analysis/retrospective/{}.csv", shape_slug(shape)), &to_csv(&retro)?)?);
            }
            outputs.push(p.store.write("analysis/shift_deviation.csv", &to_csv(&rows)?)?);
            outputs.push(p.store.write("analysis/shift_deviation_all.csv", &to_csv(&rows_all)?)?);
            Ok(StageResult::ok(outputs))
        })?;
        read_csv(&self.store.path("analysis/shift_deviation.csv"))
    }

    /// Landscape grid(s) around the cooldown start, middle or end of the
    /// configured cooldown run.
    pub fn landscape(&mut self, at: At) -> Result<LandscapeGrid> {
        let Some(spec) = self.manifest.landscape.clone() else {
            bail!("manifest has no [landscape] section");
        };
        let pre = self.base()?;
        let fin = self.cooldown(spec.shape, spec.order_seed)?;
        let cd_stage = format!("cooldown:{}:{}", shape_slug(&spec.shape), spec.order_seed);
        let key = stage_key(&("landscape", at, self.key_of("base")?, self.key_of(&cd_stage)?, &spec));
        let dir = format!("landscape/{at}");
        let d = dir.clone();
        self.run_stage(&format!("landscape:{at}"), key, move |p| {
            let cfg = p.cooldown_config(spec.shape);
            let c = cfg.schedule.cooldown_steps as usize;
            let (center, offset) = match at {
                At::Start => (pre.checkpoint.clone(), 0),
                At::Mid => {
                    let mut half = cfg.clone();
                    half.stop_at = Some(cfg.schedule.cooldown_start() + (c / 2) as u64);
                    let out = resume_cooldown(&pre.checkpoint, &half, spec.order_seed, &p.data)?;
                    (out.checkpoint, c / 2)
                }
                At::End => (fin.checkpoint.clone(), c),
            };
            let mut order_cfg = cfg.clone();
            order_cfg.data.order_seed = spec.order_seed;
            let next = &order_cfg.data.order(offset + spec.adam_steps)[offset..];
            let batches = next.iter().map(|&i| p.data.batch(i)).collect::<cooldown_lab::Result<Vec<Batch>>>()?;
            let probe_lr = spec.probe_lr.unwrap_or_else(|| {
                let s = center.step + 1;
                match cfg.schedule.lr_at(s) {
                    Ok(lr) if s <= cfg.schedule.total_steps() && lr > 0.0 => lr,
                    _ => cfg.schedule.peak_lr,
                }
            });
            let e1 = global_direction(&pre.checkpoint.weights, &fin.checkpoint.weights)?;
            let e2 = adam_steps_direction(&center, &p.manifest.optimizer, probe_lr, &batches)?;
            let center_id = p.store.store_checkpoint(&center)?;
            let mut outputs = vec![format!("checkpoints/{center_id}.ckpt")];
            let mut first = None;
            let mut grids = vec![("grid", spec.grid)];
            if let Some(f) = spec.fine {
                grids.push(("grid_fine", f));
            }
            for (name, g) in grids {
                let grid = scan_grid_spec(p, &center, &center_id, &e1, &e2, &g)?;
                outputs.push(p.store.write(&format!("{d}/{name}.csv"), grid.to_csv().as_bytes())?);
                let meta = LandscapeMeta {
                    at,
                    center_step: center.step,
                    probe_lr,
                    probe_batches: next.to_vec(),
                    grid: serde_json::from_str(&grid.metadata_json())?,
                };
                outputs.push(p.store.write(&format!("{d}/{name}.meta.json"), &serde_json::to_vec_pretty(&meta)?)?);
                outputs.push(p.store.write(&format!("{d}/{name}.json"), &serde_json::to_vec(&grid)?)?);
                first.get_or_insert(grid);
            }
            Ok(StageResult::ok(outputs))
        })?;
        let text = self.store.read_to_string(&format!("{dir}/grid.json"))?;
        serde_json::from_str(&text).context("parsing stored grid")
    }

    pub fn probe(&mut self) -> Result<Vec<ProbeRow>> {
        let Some(spec) = self.manifest.probe.clone() else {
            bail!("manifest has no [probe] section");
        };
        let pre = self.base()?;
        let fin = self.cooldown(spec.shape, spec.order_seed)?;
        let cd_stage = format!("cooldown:{}:{}", shape_slug(&spec.shape), spec.order_seed);
        let key = stage_key(&("probe", self.key_of("base")?, self.key_of(&cd_stage)?, &spec));
        self.run_stage("probe", key, |p| {
            let model = p.manifest.model;
            let n = spec.train_batches.min(p.data.n_batches());
            let train_batches = (0..n).map(|i| p.data.batch(i)).collect::<cooldown_lab::Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for (name, ck) in [("pre", &pre.checkpoint), ("final", &fin.checkpoint)] {
                let head = ck.weights.segment("lm_head").ok_or_else(|| anyhow!("checkpoint has no lm_head"))?.to_vec();
                for &layer in &spec.layers {
                    let r = train_probe(p.exec, &ck.weights, &model, layer, &head, &train_batches, p.data.val_batches(), &spec.config)?;
                    rows.extend(r.series.iter().map(|pt| ProbeRow {
                        checkpoint: name.into(),
                        step: ck.step,
                        layer,
                        probe_step: pt.step,
                        perplexity: pt.eval_perplexity,
                    }));
                }
            }
            Ok(StageResult::ok(vec![p.store.write("analysis/probe.csv", &to_csv(&rows)?)?]))
        })?;
        read_csv(&self.store.path("analysis/probe.csv"))
    }

    /// Plot-ready bundle under `export/`. Missing analyses are listed in
    /// `export/missing.txt`, not treated as errors.
    pub fn export(&mut self) -> Result<Vec<String>> {
        let key = stage_key(&("export", self.store.status().iter().filter(|(k, _)| *k != "export").map(|(k, v)| (k.clone(), v.key.clone())).collect::<Vec<_>>()));
        self.run_stage("export", key, |p| {
            let (outputs, missing) = crate::export::export_plots(p)?;
            let mut outputs = outputs;
            outputs.push(p.store.write("export/missing.txt", missing.join("\n").as_bytes())?);
            Ok(StageResult::ok(outputs))
        })?;
        let missing = self.store.read_to_string("export/missing.txt")?;
        Ok(missing.lines().map(str::to_string).filter(|l| !l.is_empty()).collect())
    }

    /// Every stage the manifest asks for, in dependency order. Stops at the
    /// first stage that fails outright; partial stages do not stop the run.
    pub fn run_all(&mut self) -> Result<()> {
        self.base()?;
        if self.manifest.control.is_some() {
            self.control()?;
        }
        if self.manifest.sweep.is_some() {
            self.sweep()?;
        }
        if self.manifest.reference.is_some() {
            self.reference()?;
        }
        if self.manifest.soup.is_some() {
            self.soup()?;
        }
        if self.manifest.batch_sweep.is_some() {
            self.batch_sweep()?;
        }
        if self.manifest.beta_sweep.is_some() {
            self.beta_sweep()?;
        }
        if self.manifest.sweep.is_some() {
            for space in self.manifest.analysis.spaces.clone() {
                if space != Space::LossSimple && self.manifest.reference.is_none() {
                    continue;
                }
                self.analyze(space)?;
            }
            if self.manifest.analysis.shift {
                self.shift()?;
            }
        }
        if let Some(l) = self.manifest.landscape.clone() {
            for at in l.at {
                self.landscape(at)?;
            }
        }
        if self.manifest.probe.is_some() {
            self.probe()?;
        }
        self.export()?;
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        *self.data.config()
    }
}

#[derive(Serialize)]
struct LandscapeMeta {
    at: At,
    center_step: u64,
    probe_lr: f64,
    probe_batches: Vec<usize>,
    grid: serde_json::Value,
}

fn scan_grid_spec(
    p: &Pipeline,
    center: &Checkpoint,
    center_id: &str,
    e1: &cooldown_lab::landscape::Direction,
    e2: &cooldown_lab::landscape::Direction,
    g: &GridSpec,
) -> Result<LandscapeGrid> {
    let (a, b) = g.coefficients();
    Ok(scan_grid(
        p.exec,
        &center.weights,
        center_id,
        &p.manifest.model,
        e1,
        e2,
        &a,
        &b,
        p.data.val_batches(),
    )?)
}

/// Cell config for batch scale `k`: `k` batches per step, `C / k` steps
/// (rounded down; the flag reports rounding), peak lr times the rule's
/// factor and, with `match_half_life`, both betas raised to the `k`-th
/// power.
pub fn batch_sweep_config(
    cooldown: &RunConfig,
    k: u64,
    match_half_life: bool,
    rule: cooldown_lab::optimizer::LrScaleRule,
) -> Result<(RunConfig, bool)> {
    if k == 0 {
        bail!("batch scale must be >= 1");
    }
    let c = cooldown.schedule.cooldown_steps;
    let steps = c / k;
    if steps == 0 {
        bail!("batch scale {k} leaves no cooldown steps out of {c}");
    }
    let mut cfg = cooldown.clone();
    cfg.schedule = ScheduleSpec {
        peak_lr: cooldown.schedule.peak_lr * rule.factor(k as f64),
        cooldown_steps: steps,
        ..cooldown.schedule
    };
    cfg.data.batches_per_step = k as usize;
    if match_half_life {
        cfg.optimizer.beta1 = cooldown_lab::optimizer::rescale_beta(cooldown.optimizer.beta1, k as f64);
        cfg.optimizer.beta2 = cooldown_lab::optimizer::rescale_beta(cooldown.optimizer.beta2, k as f64);
    }
    Ok((cfg, steps * k != c))
}

/// Cell config for beta power `p`: `beta^p` for both betas, or only for
/// beta2.
pub fn beta_sweep_config(cooldown: &RunConfig, p: f64, vary: BetaVary) -> RunConfig {
    let mut cfg = cooldown.clone();
    cfg.optimizer = match vary {
        BetaVary::Both => cooldown.optimizer.with_beta_power(p),
        BetaVary::Beta2Only => cooldown_lab::optimizer::OptimizerConfig {
            beta2: cooldown.optimizer.beta2.powf(p),
            ..cooldown.optimizer
        },
    };
    cfg
}
