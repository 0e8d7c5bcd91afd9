use std::path::Path;
use std::process::Command;

use cooldown_cli::artifacts::StageState;
use cooldown_cli::export::{curve_rows, schedule_rows, standard_shapes};
use cooldown_cli::manifest::{BetaVary, Manifest, SweepSpec};
use cooldown_cli::pipeline::{batch_sweep_config, beta_sweep_config, Pipeline};
use cooldown_cli::tables::{parse_csv, read_csv, to_csv, BiasVarianceRow, CurveRow, ScheduleRow};
use cooldown_lab::optimizer::LrScaleRule;
use cooldown_lab::schedules::CooldownShape;
use cooldown_lab::Exec;

const TINY: &str = r#"
version = 1
name = "tiny"

[corpus]
synthetic = { seed = 5, bytes = 20000 }

[data]
batch_size = 2
seq_len = 8
val_fraction = 0.05
val_rows = 8

[model]
d_model = 8
n_layers = 1
ffw_dim = 16
head_dim = 4
n_heads = 2
seq_len = 8

[schedule]
kind = "wsd"
shape = "linear"
warmup_steps = 2
stable_steps = 6
cooldown_steps = 4
peak_lr = 0.003

[base]
init_seed = 0
order_seed = 0
eval_every = 4
"#;

fn tiny() -> Manifest {
    Manifest::parse(TINY).unwrap()
}

fn open(m: Manifest, dir: &Path) -> Pipeline {
    Pipeline::open(m, dir, Exec::Sequential).unwrap()
}

#[test]
fn empty_sweep_axes_run_only_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = open(tiny(), dir.path());
    p.run_all().unwrap();
    let stages: Vec<&str> = p.store.status().keys().map(String::as_str).collect();
    assert_eq!(stages, ["base", "export"]);
    assert!(p.all_ok());
    assert!(!dir.path().join("runs/sweep").exists());
}

#[test]
fn rerun_of_a_completed_manifest_is_fully_cached() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny();
    m.sweep = Some(SweepSpec {
        shapes: vec![CooldownShape::Sqrt, CooldownShape::Square],
        alphas: vec![],
        seeds: vec![1, 2],
    });
    m.analysis.spaces = vec![cooldown_lab::analysis::Space::LossSimple];
    let mut p = open(m.clone(), dir.path());
    p.run_all().unwrap();
    assert!(p.reports().iter().all(|r| !r.cached));
    let before = std::fs::read(dir.path().join("status.json")).unwrap();
    let record = std::fs::read(dir.path().join("runs/sweep/sqrt/seed-1/record.json")).unwrap();

    let mut again = open(m, dir.path());
    again.run_all().unwrap();
    assert!(!again.reports().is_empty());
    assert!(again.reports().iter().all(|r| r.cached), "{:?}", again.reports());
    assert_eq!(std::fs::read(dir.path().join("status.json")).unwrap(), before);
    assert_eq!(std::fs::read(dir.path().join("runs/sweep/sqrt/seed-1/record.json")).unwrap(), record);
}

#[test]
fn changed_manifest_section_invalidates_only_dependent_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny();
    m.sweep = Some(SweepSpec {
        shapes: vec![CooldownShape::Sqrt],
        alphas: vec![],
        seeds: vec![1, 2],
    });
    m.analysis.spaces = vec![];
    m.analysis.shift = false;
    open(m.clone(), dir.path()).run_all().unwrap();
    m.sweep.as_mut().unwrap().seeds = vec![1, 3];
    let mut p = open(m, dir.path());
    p.run_all().unwrap();
    let cached = |s: &str| p.reports().iter().find(|r| r.stage == s).unwrap().cached;
    assert!(cached("base"));
    assert!(!cached("sweep"));
}

#[test]
fn verify_reports_tampered_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = open(tiny(), dir.path());
    p.base().unwrap();
    assert!(p.store.verify().is_empty());
    let rel = "runs/base/metrics.jsonl";
    let mut bytes = std::fs::read(dir.path().join(rel)).unwrap();
    bytes[0] ^= 1;
    std::fs::write(dir.path().join(rel), bytes).unwrap();
    let problems = p.store.verify();
    assert_eq!(problems.len(), 1);
    assert!(problems[0].starts_with(rel));
}

#[test]
fn batch_sweep_cells_match_half_life_and_token_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny();
    m.schedule.cooldown_steps = 8;
    let p = open(m, dir.path());
    let base = p.cooldown_config(CooldownShape::Sqrt);
    let (k2, rounded) = batch_sweep_config(&base, 2, true, LrScaleRule::Sqrt).unwrap();
    assert!(!rounded);
    assert!((k2.optimizer.beta1 - 0.81).abs() < 1e-12);
    assert!((k2.optimizer.beta2 - 0.9025).abs() < 1e-12);
    assert!((k2.schedule.peak_lr - base.schedule.peak_lr * 2f64.sqrt()).abs() < 1e-15);

    let (plain, _) = batch_sweep_config(&base, 2, false, LrScaleRule::Sqrt).unwrap();
    assert_eq!((plain.optimizer.beta1, plain.optimizer.beta2), (0.9, 0.95));

    let (k1, _) = batch_sweep_config(&base, 1, true, LrScaleRule::Sqrt).unwrap();
    assert_eq!(k1.optimizer, base.optimizer);
    assert_eq!(k1.schedule, base.schedule);

    for k in [1u64, 2, 4, 8] {
        let (c, _) = batch_sweep_config(&base, k, true, LrScaleRule::Sqrt).unwrap();
        assert_eq!(c.schedule.cooldown_steps * c.data.batches_per_step as u64, 8);
    }
    let (c3, rounded) = batch_sweep_config(&base, 3, true, LrScaleRule::Sqrt).unwrap();
    assert!(rounded);
    assert_eq!(c3.schedule.cooldown_steps, 2);
    assert!(batch_sweep_config(&base, 9, true, LrScaleRule::Sqrt).is_err());
    assert!(batch_sweep_config(&base, 0, true, LrScaleRule::Sqrt).is_err());
}

#[test]
fn beta_sweep_cells_power_the_betas() {
    let dir = tempfile::tempdir().unwrap();
    let p = open(tiny(), dir.path());
    let base = p.cooldown_config(CooldownShape::Sqrt);
    let both = beta_sweep_config(&base, 0.3, BetaVary::Both);
    assert!((both.optimizer.beta1 - 0.9f64.powf(0.3)).abs() < 1e-15);
    assert!((both.optimizer.beta1 - 0.9689).abs() < 1e-4);
    assert!((both.optimizer.beta2 - 0.9847).abs() < 1e-4);
    let one = beta_sweep_config(&base, 1.0, BetaVary::Both);
    assert_eq!(one.optimizer, base.optimizer);
    for q in [0.3, 0.5, 2.0] {
        let c = beta_sweep_config(&base, q, BetaVary::Beta2Only);
        assert_eq!(c.optimizer.beta1, 0.9);
        assert!((c.optimizer.beta2 - 0.95f64.powf(q)).abs() < 1e-15);
    }
}

#[test]
fn schedule_export_has_six_curves_ending_at_zero() {
    let m = tiny();
    let shapes = standard_shapes();
    assert_eq!(shapes.len(), 6);
    let rows = schedule_rows(&m.schedule, &shapes);
    let back: Vec<ScheduleRow> = parse_csv(&to_csv(&rows).unwrap()).unwrap();
    assert_eq!(back, rows);
    let total = m.schedule.total_steps();
    for shape in &shapes {
        let curve: Vec<&ScheduleRow> = back
            .iter()
            .filter(|r| r.shape == shape.kind_name() && r.alpha == shape.alpha())
            .collect();
        assert_eq!(curve.len() as u64, total + 1);
        assert_eq!(curve.last().unwrap().step, total);
        assert_eq!(curve.last().unwrap().lr, 0.0);
    }
}

#[test]
fn exported_lowered_linear_run_shows_the_lr_jump() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = open(tiny(), dir.path());
    let base = p.base().unwrap();
    let shape = CooldownShape::lowered_linear(0.4).unwrap();
    let run = p.cooldown(shape, 1).unwrap();
    let rows = curve_rows(&run.record, Some(&base.record));
    let start = p.manifest.pre_steps();
    let peak = p.manifest.schedule.peak_lr;
    let lr = |s: u64| rows.iter().find(|r| r.step == s).unwrap().lr;
    assert_eq!(lr(start), peak);
    // Step `start + 1` is the first cooldown update: f(1/C) * 0.4 * peak.
    let c = p.manifest.schedule.cooldown_steps as f64;
    assert!((lr(start + 1) - 0.4 * (1.0 - 1.0 / c) * peak).abs() < 1e-15);
    let drops: Vec<f64> = rows.windows(2).map(|w| w[0].lr - w[1].lr).collect();
    let jump = lr(start) - lr(start + 1);
    let others = drops.iter().copied().filter(|d| *d != jump).fold(0.0, f64::max);
    assert!(jump > 2.0 * others, "jump {jump} vs largest other drop {others}");
    assert_eq!(rows.first().unwrap().step, 1);
    assert_eq!(rows.len() as u64, p.manifest.schedule.total_steps());

    p.export().unwrap();
    let exported: Vec<CurveRow> =
        read_csv(&dir.path().join("export/runs/cooldown__lowered_linear-0.4__seed-1.csv")).unwrap();
    assert_eq!(exported, rows);
}

#[test]
fn exported_report_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny();
    m.sweep = Some(SweepSpec {
        shapes: vec![CooldownShape::Sqrt, CooldownShape::Square],
        alphas: vec![0.5],
        seeds: vec![1, 2],
    });
    let mut p = open(m, dir.path());
    let rows = p.analyze(cooldown_lab::analysis::Space::LossSimple).unwrap();
    assert_eq!(rows.len(), 3);
    let losses: Vec<f64> = p.sweep_runs().unwrap()[0].1.iter().map(|r| r.record.final_val_loss).collect();
    let (bias, variance) = cooldown_lab::analysis::bias_variance_loss_simple(&losses).unwrap();
    assert_eq!((rows[0].bias, rows[0].variance), (bias, variance));
    let text = std::fs::read(dir.path().join("analysis/bias_variance_loss_simple.csv")).unwrap();
    assert!(text.starts_with(b"shape,alpha,bias,variance,residual\n"));
    let back: Vec<BiasVarianceRow> = parse_csv(&text).unwrap();
    assert_eq!(back, rows);
    assert_eq!(to_csv(&back).unwrap(), text);
}

#[test]
fn missing_analyses_are_listed_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny();
    m.sweep = Some(SweepSpec {
        shapes: vec![CooldownShape::Sqrt],
        alphas: vec![],
        seeds: vec![1, 2],
    });
    m.analysis.spaces = vec![cooldown_lab::analysis::Space::LossSimple];
    let mut p = open(m, dir.path());
    p.base().unwrap();
    let missing = p.export().unwrap();
    assert!(missing.contains(&"analysis/bias_variance_loss_simple.csv".to_string()));
    assert_eq!(p.store.stage_status("export").unwrap().state, StageState::Done);
}

#[test]
fn binary_runs_verifies_and_rejects_bad_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("tiny.toml");
    std::fs::write(&manifest, TINY).unwrap();
    let out = dir.path().join("out");
    let bin = env!("CARGO_BIN_EXE_cooldown");
    let run = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .env("COOLDOWN_LAB_OUT", &out)
            .output()
            .unwrap()
    };
    let m = manifest.to_str().unwrap();
    let r = run(&["--workers", "1", "train", m]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("tiny/runs/base/record.json").exists());
    assert!(run(&["verify", m]).status.success());

    let schedule = run(&["schedule", m]);
    let rows: Vec<ScheduleRow> = parse_csv(&schedule.stdout).unwrap();
    assert_eq!(rows.len(), 6 * 13);

    std::fs::write(out.join("tiny/runs/base/record.json"), "{}").unwrap();
    assert_eq!(run(&["verify", m]).status.code(), Some(1));

    std::fs::write(&manifest, format!("{TINY}\n[sweep]\nshapes = [\"sqrt\"]\nseeds = [1, 2]\ntypo = 1\n")).unwrap();
    let bad = run(&["sweep", m]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("typo"));
}
