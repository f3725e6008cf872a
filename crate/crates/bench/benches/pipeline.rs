use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use relex_bench::{extractions, generation, random_store, Lcg};
use relex_core::context_sets::softmax_weights;
use relex_core::prompt::parse_generation;
use relex_core::scoring::{aggregate, score_generation};
use relex_core::RelationType;

fn bench_top_n(c: &mut Criterion) {
    let mut group = c.benchmark_group("top_n_pool");
    for &docs in &[1_000usize, 10_000] {
        let store = random_store(docs + 1, 384, 7);
        let ids: Vec<String> = (1..=docs).map(|i| format!("doc{i:06}")).collect();
        group.bench_with_input(BenchmarkId::from_parameter(docs), &ids, |b, ids| {
            b.iter(|| store.top_n_pool("doc000000", black_box(ids), 20).unwrap())
        });
    }
    group.finish();
}

fn bench_softmax(c: &mut Criterion) {
    let mut rng = Lcg::new(3);
    let scores: Vec<f64> = (0..10).map(|_| rng.next_f64()).collect();
    c.bench_function("softmax_weights/10", |b| {
        b.iter(|| softmax_weights(black_box(&scores), 0.1).unwrap())
    });
}

fn bench_parse_and_score(c: &mut Criterion) {
    let resp = generation(15);
    let rel = RelationType {
        id: "P17".into(),
        name: "country".into(),
    };
    c.bench_function("parse_generation/15", |b| {
        b.iter(|| parse_generation(black_box(resp.text())))
    });
    c.bench_function("score_generation/15", |b| {
        b.iter(|| score_generation(0, black_box(&resp), &rel).unwrap())
    });
}

fn bench_aggregate(c: &mut Criterion) {
    let ex = extractions(5, 40, 11);
    let w = vec![0.2; 5];
    c.bench_function("aggregate/5x40", |b| {
        b.iter(|| aggregate("P17", black_box(&ex), &w).unwrap())
    });
}

criterion_group!(
    benches,
    bench_top_n,
    bench_softmax,
    bench_parse_and_score,
    bench_aggregate
);
criterion_main!(benches);
