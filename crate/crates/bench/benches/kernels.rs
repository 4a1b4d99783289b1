use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use nrccr_bench::{bench_dataset, random_matrix, retrieval_problem};
use nrccr_core::corpus::make_batches;
use nrccr_core::diffmath::Tape;
use nrccr_core::retrieval::{evaluate, mean_average_precision, rank_items, recall_at_k};
use nrccr_core::trainer::{train_step, TrainConfig, TrainState};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (random_matrix(n, n, 1), random_matrix(n, n, 2));
        g.bench_with_input(BenchmarkId::new("forward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
                black_box(tape.matmul(x, y).unwrap());
            })
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.leaf(a.clone(), true), tape.leaf(b.clone(), true));
                let p = tape.matmul(x, y).unwrap();
                let s = tape.sum(p).unwrap();
                tape.backward(s).unwrap();
                black_box(tape.grad(x).is_some());
            })
        });
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let data = bench_dataset();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    for (name, basic) in [("full", false), ("basic", true)] {
        let mut config = TrainConfig::default();
        if basic {
            config = config.basic();
        }
        let ids = make_batches(&data.train, config.batch_size, 0, 1).unwrap().remove(0);
        let mut state = TrainState::fresh(&config, &data).unwrap();
        let mut tape = Tape::new();
        g.bench_function(name, |bench| {
            bench.iter(|| black_box(train_step(&mut state, &config, &data.train, &ids, &mut tape).unwrap()))
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let (scores, relevance) = retrieval_problem(300, 100, 3);
    let mut g = c.benchmark_group("metrics");
    g.bench_function("rank_300x100", |b| b.iter(|| black_box(scores.iter().map(|s| rank_items(s)).count())));
    let rankings: Vec<Vec<usize>> = scores.iter().map(|s| rank_items(s)).collect();
    g.bench_function("recall_and_map", |b| {
        b.iter(|| {
            black_box(recall_at_k(&rankings, &relevance, 5).unwrap());
            black_box(mean_average_precision(&rankings, &relevance).unwrap());
        })
    });
    let data = bench_dataset();
    let config = TrainConfig::default();
    let state = TrainState::fresh(&config, &data).unwrap();
    g.sample_size(10);
    g.bench_function("evaluate_test_split", |b| {
        b.iter(|| black_box(evaluate(&state.model, &data.test, &config.eval_options()).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, matmul, training_step, metrics);
criterion_main!(benches);
