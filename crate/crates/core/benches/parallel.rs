//! Sequential vs rayon execution of the data-parallel loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedbell_core::fedavg::aggregate_with;
use fedbell_core::model::{evaluate_with, loss_and_gradient_with};
use fedbell_core::synth::build_dataset_with;
use fedbell_core::{init_params, ClassifierConfig, ClientUpdate, Execution};
use std::hint::black_box;

fn modes() -> Vec<(&'static str, Execution)> {
    #[allow(unused_mut)]
    let mut m = vec![("sequential", Execution::Sequential)];
    #[cfg(feature = "parallel")]
    m.push(("parallel", Execution::Parallel));
    m
}

fn classifier(hidden_dim: usize, seed: u64) -> ClassifierConfig {
    ClassifierConfig {
        input_dim: 256,
        hidden_dim,
        num_classes: 4,
        seed,
    }
}

fn bench_gradient(c: &mut Criterion) {
    let data = build_dataset_with(Execution::default(), 2000, 4, 1).unwrap();
    let params = init_params(&classifier(32, 1)).unwrap();
    let mut group = c.benchmark_group("loss_and_gradient_2000x256");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| loss_and_gradient_with(exec, black_box(&params), black_box(&data)).unwrap())
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let data = build_dataset_with(Execution::default(), 2000, 4, 2).unwrap();
    let params = init_params(&classifier(32, 2)).unwrap();
    let mut group = c.benchmark_group("evaluate_2000x256");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_with(exec, black_box(&params), black_box(&data)).unwrap())
        });
    }
    group.finish();
}

fn bench_aggregate(c: &mut Criterion) {
    let updates: Vec<ClientUpdate> = (0..8)
        .map(|i| ClientUpdate {
            client_id: format!("client-{i}"),
            round: 1,
            sample_count: 100 + i,
            params: init_params(&classifier(256, i)).unwrap(),
        })
        .collect();
    let mut group = c.benchmark_group("aggregate_8x67k");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| aggregate_with(exec, black_box(&updates)).unwrap())
        });
    }
    group.finish();
}

fn bench_scenes(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_dataset_500");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| build_dataset_with(exec, 500, 4, black_box(7)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gradient, bench_evaluate, bench_aggregate, bench_scenes);
criterion_main!(benches);
