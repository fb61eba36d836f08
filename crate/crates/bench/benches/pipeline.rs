// SPDX-License-Identifier: MIT OR Apache-2.0

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use factlab_bench::fixture;
use factlab_core::attribution::attribution_map;
use factlab_core::harness::run_behavior_suite;
use factlab_core::intervention::{InterventionSet, InterventionSpec};
use factlab_core::model::{train_step, training_sequences, Adam};
use factlab_core::ovsvd::head_svd;

fn forward(c: &mut Criterion) {
    let f = fixture(2);
    let prompt = &f.prompts[0].tokens;
    let iv = InterventionSet::single(InterventionSpec {
        layer: 0,
        head: 1,
        alpha: -0.5,
    });
    c.bench_function("forward_last/2x128", |b| {
        b.iter(|| f.model.forward_last(black_box(prompt), false, None).unwrap())
    });
    c.bench_function("forward_last/2x128/intervened", |b| {
        b.iter(|| f.model.forward_last(black_box(prompt), false, Some(&iv)).unwrap())
    });
    c.bench_function("greedy_decode/12", |b| {
        b.iter(|| f.model.greedy_decode(black_box(prompt), 12, None, None).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let f = fixture(2);
    let seqs = training_sequences(&f.docs, f.vocab.eot_id(), 48);
    let batch: Vec<&[u32]> = seqs.iter().take(32).map(Vec::as_slice).collect();
    let mut model = f.model.clone();
    let mut opt = Adam::new(model.n_params(), 0.9, 0.98, 1e-8, 0.0);
    c.bench_function("train_step/batch32", |b| {
        b.iter(|| train_step(&mut model, &mut opt, black_box(&batch), 1e-4, 1.0).unwrap())
    });
}

fn analysis(c: &mut Criterion) {
    let f = fixture(2);
    let prompts = &f.prompts[..64];
    let mut g = c.benchmark_group("analysis");
    g.sample_size(10);
    g.bench_function("behavior_suite/64", |b| {
        b.iter(|| run_behavior_suite(&f.model, &f.vocab, black_box(prompts), 12, None))
    });
    g.bench_function("attribution_map/64", |b| b.iter(|| attribution_map(&f.model, black_box(prompts)).unwrap()));
    g.bench_function("head_svd/128x32", |b| b.iter(|| head_svd(black_box(&f.model), 1, 2).unwrap()));
    g.finish();
    black_box(&f.world);
}

criterion_group!(benches, forward, training, analysis);
criterion_main!(benches);
