use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vitlr_bench::{frames, tiny_model};
use vitlr_core::loss::{total_loss_on_tape, LossConfig};
use vitlr_core::ops::NormMode;
use vitlr_core::{BBox, Tape, Target};

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict_clip");
    group.sample_size(20);
    for n in [1usize, 3, 5] {
        let model = tiny_model(n);
        let input = frames(model.config(), 11);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| model.predict_clip(black_box(&input)).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let model = tiny_model(3);
    let input = frames(model.config(), 12);
    let targets = vec![vec![Target {
        bbox: BBox::new(20.0, 24.0, 6.0, 14.0),
        state: 0,
    }]];
    let cfg = LossConfig::default();
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("forward+backward n=3", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let (heads, _) = model.forward(&mut tape, &input, NormMode::Train).unwrap();
            let (loss, _, _) = total_loss_on_tape(&mut tape, &heads, &targets, &cfg).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, inference, training_step);
criterion_main!(benches);
