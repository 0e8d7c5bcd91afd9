//! Plot-ready bundle: schedule curves, run curves, gradient dynamics and
//! copies of the analysis tables and landscape grids.

use anyhow::Result;
use cooldown_lab::schedules::{CooldownShape, ScheduleSpec};
use cooldown_lab::trainer::RunRecord;

use crate::pipeline::{shape_slug, Pipeline};
use crate::tables::{to_csv, CurveRow, DynamicsRow, ScheduleRow};

/// The non-parametric shapes and `lowered_linear` at 0.5.
pub fn standard_shapes() -> Vec<CooldownShape> {
    CooldownShape::family(&[0.5])
}

pub fn schedule_rows(spec: &ScheduleSpec, shapes: &[CooldownShape]) -> Vec<ScheduleRow> {
    let mut rows = Vec::new();
    for shape in shapes {
        for (step, lr) in spec.with_shape(*shape).curve() {
            rows.push(ScheduleRow {
                shape: shape.kind_name().into(),
                alpha: shape.alpha(),
                step,
                lr,
            });
        }
    }
    rows
}

/// Metric rows of `run`, preceded by those of `base` when `run` resumed
/// from the end of it.
pub fn curve_rows(run: &RunRecord, base: Option<&RunRecord>) -> Vec<CurveRow> {
    let prefix = base
        .filter(|b| run.start_step > 0 && b.metrics.last().map(|m| m.step) == Some(run.start_step))
        .map(|b| b.metrics.as_slice())
        .unwrap_or(&[]);
    prefix
        .iter()
        .chain(&run.metrics)
        .map(|m| CurveRow {
            step: m.step,
            lr: m.lr,
            train_loss: m.train_loss,
            val_perplexity: m.val_perplexity,
        })
        .collect()
}

pub fn dynamics_rows(run: &RunRecord, window: usize) -> Vec<DynamicsRow> {
    run.smoothed_dynamics(window)
        .into_iter()
        .map(|(step, grad_norm, alignment)| DynamicsRow {
            step,
            grad_norm,
            alignment,
        })
        .collect()
}

/// Write the bundle under `export/`. Returns the written paths and the
/// analyses that were not available.
pub fn export_plots(p: &mut Pipeline) -> Result<(Vec<String>, Vec<String>)> {
    let mut outputs = Vec::new();
    let mut missing = Vec::new();

    let mut shapes = standard_shapes();
    if let Some(s) = &p.manifest.sweep {
        for shape in s.all_shapes()? {
            if !shapes.contains(&shape) {
                shapes.push(shape);
            }
        }
    }
    let rows = schedule_rows(&p.manifest.schedule, &shapes);
    outputs.push(p.store.write("export/schedules.csv", &to_csv(&rows)?)?);

    let base = if p.store.exists("runs/base/record.json") {
        Some(p.store.load_run("runs/base")?.record)
    } else {
        missing.push("runs/base".to_string());
        None
    };
    let window = p.manifest.base.dynamics_window;
    let records: Vec<String> = p
        .store
        .hashes()
        .keys()
        .filter(|k| k.starts_with("runs/") && k.ends_with("/record.json"))
        .cloned()
        .collect();
    for rel in records {
        let dir = rel.trim_start_matches("runs/").trim_end_matches("/record.json");
        let record: RunRecord = serde_json::from_str(&p.store.read_to_string(&rel)?)?;
        let name = dir.replace('/', "__");
        let stitched = if dir == "base" { None } else { base.as_ref() };
        outputs.push(p.store.write(&format!("export/runs/{name}.csv"), &to_csv(&curve_rows(&record, stitched))?)?);
        outputs.push(p.store.write(&format!("export/dynamics/{name}.csv"), &to_csv(&dynamics_rows(&record, window))?)?);
    }

    let mut wanted: Vec<String> = Vec::new();
    if p.manifest.control.is_some() {
        wanted.push("analysis/control.csv".into());
    }
    if p.manifest.soup.is_some() {
        wanted.push("analysis/soup.csv".into());
    }
    if p.manifest.batch_sweep.is_some() {
        wanted.push("analysis/batch_sweep.csv".into());
    }
    if p.manifest.beta_sweep.is_some() {
        wanted.push("analysis/beta_sweep.csv".into());
    }
    if let Some(s) = &p.manifest.sweep {
        for space in &p.manifest.analysis.spaces {
            wanted.push(format!("analysis/bias_variance_{space}.csv"));
        }
        if p.manifest.analysis.shift {
            wanted.push("analysis/shift_deviation.csv".into());
            wanted.push("analysis/shift_deviation_all.csv".into());
            for shape in s.all_shapes()? {
                wanted.push(format!("analysis/retrospective/{}.csv", shape_slug(&shape)));
            }
        }
    }
    if let Some(l) = &p.manifest.landscape {
        for at in &l.at {
            wanted.push(format!("landscape/{at}/grid.csv"));
            wanted.push(format!("landscape/{at}/grid.meta.json"));
            if l.fine.is_some() {
                wanted.push(format!("landscape/{at}/grid_fine.csv"));
            }
        }
    }
    if p.manifest.probe.is_some() {
        wanted.push("analysis/probe.csv".into());
    }
    for rel in wanted {
        if p.store.exists(&rel) {
            let bytes = std::fs::read(p.store.path(&rel))?;
            outputs.push(p.store.write(&format!("export/{rel}"), &bytes)?);
        } else {
            missing.push(rel);
        }
    }
    Ok((outputs, missing))
}
