//! Sequential against rayon-parallel execution of the data-parallel hot
//! paths. Both modes produce identical numbers; only wall time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cooldown_lab::data::{retrospective_eval, synthetic_text, ByteTokenizer, DataConfig, Dataset, TokenCorpus};
use cooldown_lab::landscape::{global_direction, scan_grid};
use cooldown_lab::model::{loss_and_gradients, Batch, ModelConfig, WeightVector};
use cooldown_lab::Exec;

fn setup() -> (ModelConfig, Dataset, WeightVector) {
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 2,
        ffw_dim: 64,
        head_dim: 16,
        n_heads: 2,
        vocab_size: 256,
        seq_len: 32,
    };
    let corpus = TokenCorpus::from_text(&synthetic_text(7, 100_000), &ByteTokenizer).unwrap();
    let data = Dataset::new(
        corpus,
        DataConfig {
            batch_size: 16,
            seq_len: 32,
            val_fraction: 0.1,
            val_rows: 32,
        },
    )
    .unwrap();
    (cfg, data, WeightVector::init(&cfg, 1))
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn gradients(c: &mut Criterion) {
    let (cfg, data, w) = setup();
    let batch: Batch = data.batch(0).unwrap();
    let mut g = c.benchmark_group("loss_and_gradients");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| loss_and_gradients(exec, &w, &cfg, &batch, 1.0).unwrap())
        });
    }
    g.finish();
}

fn grid(c: &mut Criterion) {
    let (cfg, data, w) = setup();
    let other = WeightVector::init(&cfg, 2);
    let e1 = global_direction(&w, &other).unwrap();
    let e2 = global_direction(&w, &WeightVector::init(&cfg, 3)).unwrap();
    let coef = [-1.0, 0.0, 1.0];
    let mut g = c.benchmark_group("scan_grid_3x3");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| scan_grid(exec, &w, "bench", &cfg, &e1, &e2, &coef, &coef, data.val_batches()).unwrap())
        });
    }
    g.finish();
}

fn retrospective(c: &mut Criterion) {
    let (cfg, data, w) = setup();
    let order: Vec<usize> = (0..32).collect();
    let mut g = c.benchmark_group("retrospective_eval_32");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| retrospective_eval(exec, &w, &cfg, &data, &order).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, gradients, grid, retrospective);
criterion_main!(benches);
