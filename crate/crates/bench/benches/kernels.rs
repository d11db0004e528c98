use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vitlr_bench::random;
use vitlr_core::ops::{conv2d, dense, layernorm};

fn convolutions(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let x = random(&[2, 16, 32, 32], 1);
    for k in [1usize, 3, 7] {
        let w = random(&[16, 16, k, k], 2);
        let b = random(&[16], 3);
        group.bench_with_input(BenchmarkId::new("dense", k), &k, |bch, &k| {
            bch.iter(|| conv2d(black_box(&x), &w, &b, 1, k / 2, 1).unwrap())
        });
        let dw = random(&[16, 1, k, k], 4);
        group.bench_with_input(BenchmarkId::new("depthwise", k), &k, |bch, &k| {
            bch.iter(|| conv2d(black_box(&x), &dw, &b, 1, k / 2, 16).unwrap())
        });
    }
    group.finish();
}

fn pointwise(c: &mut Criterion) {
    let x = random(&[64, 128], 5);
    let w = random(&[128, 128], 6);
    let b = random(&[128], 7);
    c.bench_function("dense 64x128x128", |bch| {
        bch.iter(|| dense(black_box(&x), &w, &b).unwrap())
    });
    let img = random(&[2, 32, 16, 16], 8);
    let (g, be) = (random(&[32], 9), random(&[32], 10));
    c.bench_function("layernorm 2x32x16x16", |bch| {
        bch.iter(|| layernorm(black_box(&img), &g, &be, 1e-6).unwrap())
    });
}

criterion_group!(benches, convolutions, pointwise);
criterion_main!(benches);
