//! Phase-1 encoding and an ablation sweep on one worker vs. the full pool.
//! Build with `--no-default-features` to time the sequential fallback instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use starsim::blocking::AnchorSpec;
use starsim::cli::{cmd_ablate, ExperimentConfig};
use starsim::model::{init_model, ModelConfig, TokenId};
use starsim::numerics::Prng;
use starsim::par::with_workers;
use starsim::sim::{DecodeSession, StarConfig};

fn worker_counts() -> Vec<usize> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    if all > 1 {
        vec![1, all]
    } else {
        vec![1]
    }
}

fn phase1(c: &mut Criterion) {
    let model = init_model(&ModelConfig {
        d_model: 64,
        heads: 4,
        layers: 2,
        ..Default::default()
    })
    .unwrap();
    let mut prng = Prng::new(7);
    let context: Vec<TokenId> = (0..1024).map(|_| prng.next_below(256) as TokenId).collect();
    let cfg = StarConfig {
        block_size: 64,
        anchor: AnchorSpec::default(),
        hosts: 16,
        allow_idle_hosts: false,
        seed: 7,
    };
    let mut group = c.benchmark_group("phase1");
    group.sample_size(10);
    for w in worker_counts() {
        group.bench_with_input(BenchmarkId::new("workers", w), &w, |b, &w| {
            b.iter(|| {
                with_workers(Some(w), || {
                    DecodeSession::start(&model, black_box(&context), &cfg).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn ablation(c: &mut Criterion) {
    let cfg = ExperimentConfig {
        sequence_len: 256,
        block_size: Some(32),
        ..Default::default()
    };
    let suite = AnchorSpec::ablation_suite();
    let mut group = c.benchmark_group("ablation");
    group.sample_size(10);
    for w in worker_counts() {
        group.bench_with_input(BenchmarkId::new("workers", w), &w, |b, &w| {
            b.iter(|| with_workers(Some(w), || cmd_ablate(black_box(&cfg), &suite).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, phase1, ablation);
criterion_main!(benches);
