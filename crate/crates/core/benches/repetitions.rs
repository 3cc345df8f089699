use criterion::{criterion_group, criterion_main, Criterion};

use exposure_lab::harness::{run_experiment, ExperimentConfig};
use exposure_lab::models::ModelKind;

fn config() -> ExperimentConfig {
    let mut c = ExperimentConfig::with_seed(7);
    c.n_users = 90;
    c.n_items = 40;
    c.size_a = 20;
    c.n_bias = 2;
    c.quartile_size = Some(4);
    c.target_ratio = 2.0;
    c.models = vec![ModelKind::Mnl, ModelKind::Bpr];
    c.hyper.epochs = 30;
    c.n_repetitions = 8;
    c.n_null = 2;
    c
}

fn repetitions(c: &mut Criterion) {
    let cfg = config();
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).max(2);
    let mut group = c.benchmark_group("repetitions");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| run_experiment(&cfg, 1).unwrap()));
    group.bench_function("parallel", |b| b.iter(|| run_experiment(&cfg, workers).unwrap()));
    group.finish();
}

criterion_group!(benches, repetitions);
criterion_main!(benches);
