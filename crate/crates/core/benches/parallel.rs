//! Sequential against data-parallel execution for the three parallel paths:
//! matrix products, finite-difference gradient checks and independent
//! training runs.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bcaf::data::{make_synthetic_dataset, Dataset, SynthConfig};
use bcaf::model::ModelConfig;
use bcaf::tensor::kernels::matmul_with;
use bcaf::train::{gradient_suite, run_all, GradDims, Tolerance, TrainConfig};
use bcaf::{Exec, RngState};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let mut rng = RngState::new(0);
        let a: Vec<f32> = (0..n * n).map(|_| rng.normal() as f32).collect();
        let b: Vec<f32> = (0..n * n).map(|_| rng.normal() as f32).collect();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, &n| {
                bench.iter(|| matmul_with(exec, black_box(&a), black_box(&b), n, n, n))
            });
        }
    }
    group.finish();
}

fn gradcheck(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradient_suite");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |bench| {
            bench.iter(|| gradient_suite(GradDims::default(), 0, Tolerance::default(), exec).unwrap())
        });
    }
    group.finish();
}

fn training_runs(c: &mut Criterion) {
    let data = Dataset::from_conversations(make_synthetic_dataset(
        &mut RngState::new(0),
        &SynthConfig {
            conversations: 24,
            ..SynthConfig::default()
        },
    ));
    let configs: Vec<(String, TrainConfig)> = (0..4)
        .map(|seed| {
            let cfg = TrainConfig {
                model: ModelConfig::desk(16, 4, 1),
                max_epochs: 3,
                seed,
                ..TrainConfig::default()
            };
            (format!("seed{seed}"), cfg)
        })
        .collect();
    let mut group = c.benchmark_group("training_runs");
    group.sample_size(10).measurement_time(Duration::from_secs(10));
    for (name, exec) in MODES {
        group.bench_function(name, |bench| bench.iter(|| run_all(&data, &configs, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, matmul, gradcheck, training_runs);
criterion_main!(benches);
