use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use gsvr_bench::{decoder, deformed, model};
use gsvr_core::deform::deform;
use gsvr_core::raster::{render, render_backward, Frame, RenderOptions};
use std::hint::black_box;

const SIZES: [(usize, usize); 2] = [(64, 64), (256, 144)];

fn bench_render(c: &mut Criterion) {
    let mut group = c.benchmark_group("render");
    for (w, h) in SIZES {
        for n in [512, 2048, 8192] {
            let gs = deformed(n, w, h);
            group.throughput(Throughput::Elements(1));
            group.bench_with_input(BenchmarkId::new(format!("{w}x{h}"), n), &gs, |b, gs| {
                b.iter(|| render(black_box(gs), w, h))
            });
        }
    }
    group.finish();
}

fn bench_deform(c: &mut Criterion) {
    let mut group = c.benchmark_group("deform");
    for n in [512, 2048, 8192] {
        let gop = model(n, 256, 144, 16);
        group.bench_with_input(BenchmarkId::from_parameter(n), &gop, |b, gop| {
            b.iter(|| deform(black_box(gop), 0.37))
        });
    }
    group.finish();
}

fn bench_decode_frame(c: &mut Criterion) {
    let mut group = c.benchmark_group("decode_frame");
    for (w, h) in SIZES {
        let dec = decoder(512, w, h, 16);
        group.throughput(Throughput::Elements(1));
        group.bench_function(format!("{w}x{h}/512"), |b| {
            b.iter(|| dec.decode_frame(black_box(7)).unwrap())
        });
    }
    group.finish();
}

fn bench_backward(c: &mut Criterion) {
    let (w, h) = (64, 64);
    let gs = deformed(512, w, h);
    let upstream = Frame::from_fn(w, h, |x, y| {
        [(x as f32 * 0.1).sin(), (y as f32 * 0.1).cos(), 0.25]
    });
    let opts = RenderOptions::default();
    c.bench_function("render_backward/64x64/512", |b| {
        b.iter(|| render_backward(black_box(&gs), black_box(&upstream), &opts).unwrap())
    });
}

criterion_group!(
    benches,
    bench_render,
    bench_deform,
    bench_decode_frame,
    bench_backward
);
criterion_main!(benches);
