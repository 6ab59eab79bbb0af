use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use pathmask_bench::fixture;
use pathmask_core::eval::greedy_decode;
use pathmask_core::train::{backward, teacher_forcing, TrainConfig};
use pathmask_core::{bfs_flatten, build_mask};

fn mask(c: &mut Criterion) {
    let f = fixture(200);
    c.bench_function("flatten_and_mask_200", |b| {
        b.iter(|| {
            for ex in &f.examples {
                let ml = bfs_flatten(&f.hierarchy, &ex.gold).unwrap();
                black_box(build_mask(&f.hierarchy, &ml).unwrap());
            }
        })
    });
}

fn model(c: &mut Criterion) {
    let f = fixture(10);
    let ex = &f.examples[0];
    let (input, _) = teacher_forcing(&ex.target, f.model.config().max_tgt_len);
    c.bench_function("forward_trace", |b| {
        b.iter(|| black_box(f.model.forward_trace(&ex.src, &input).unwrap()))
    });
    let cfg = TrainConfig { jobs: 1, ..Default::default() };
    for rho in [0.0, 100.0] {
        let cfg = TrainConfig { rho, ..cfg.clone() };
        c.bench_function(&format!("backward_batch10_rho{rho}"), |b| {
            b.iter_batched(
                || f.examples.clone(),
                |batch| black_box(backward(&f.model, &batch, &cfg, None).unwrap()),
                BatchSize::SmallInput,
            )
        });
    }
    c.bench_function("greedy_decode", |b| {
        b.iter(|| black_box(greedy_decode(&f.model, &ex.src, 20).unwrap()))
    });
}

criterion_group!(benches, mask, model);
criterion_main!(benches);
