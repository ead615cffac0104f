use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use webcp::{cosine, fuzzy_ratio, mc_threshold, softmax, standard_threshold, MonteCarloConfig};
use webcp_bench::{calibration_instance, filename_pairs, vectors};

fn bench_fuzzy(c: &mut Criterion) {
    let mut group = c.benchmark_group("fuzzy_ratio");
    for len in [16, 64] {
        let pairs = filename_pairs(64, len, 11);
        group.bench_with_input(BenchmarkId::from_parameter(len), &pairs, |b, pairs| {
            b.iter(|| pairs.iter().map(|(x, y)| fuzzy_ratio(black_box(x), black_box(y))).sum::<f64>())
        });
    }
    group.finish();
}

fn bench_thresholds(c: &mut Criterion) {
    let mut group = c.benchmark_group("mc_threshold");
    group.sample_size(20);
    for n in [500, 5000] {
        let (set, scores) = calibration_instance(n, 10, 5);
        let cfg = MonteCarloConfig::new(100, 0.1, 0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| mc_threshold(black_box(&set), black_box(&scores), &cfg).unwrap())
        });
    }
    group.finish();

    let raw: Vec<f64> = vectors(1, 5000, 9)[0].iter().map(|&x| f64::from(x)).collect();
    c.bench_function("standard_threshold/5000", |b| {
        b.iter(|| standard_threshold(black_box(&raw), 0.1).unwrap())
    });
}

fn bench_similarity(c: &mut Criterion) {
    let vs = vectors(257, 512, 3);
    c.bench_function("cosine/512x256", |b| {
        b.iter(|| vs[1..].iter().map(|v| cosine(black_box(&vs[0]), v).unwrap()).sum::<f64>())
    });
    let logits: Vec<f64> = vs[0].iter().take(1000).map(|&x| f64::from(x)).collect();
    c.bench_function("softmax/512", |b| b.iter(|| softmax(black_box(&logits), 0.07).unwrap()));
}

criterion_group!(benches, bench_fuzzy, bench_thresholds, bench_similarity);
criterion_main!(benches);
