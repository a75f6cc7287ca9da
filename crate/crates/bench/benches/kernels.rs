use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dtv_core::forge::align_pair;
use dtv_core::gbuffer::synthetic;
use dtv_core::metrics::{psnr, ssim, SsimParams};
use dtv_core::{assemble_condition, refine_mask, Image};

fn textured(w: usize, h: usize, phase: f64) -> Image {
    Image::from_fn(w, h, 3, |x, y, c| {
        let v = (x as f64 * 0.37 + phase).sin() * (y as f64 * 0.23 + c as f64).cos();
        0.5 + 0.45 * v
    })
}

fn blob_mask(w: usize, h: usize) -> Image {
    let (cx, cy, r) = (w as f64 / 2.0, h as f64 / 2.0, w.min(h) as f64 / 5.0);
    Image::from_fn(w, h, 1, |x, y, _| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        (1.0 - d / (2.0 * r)).clamp(0.0, 1.0)
    })
}

fn bench_refine(c: &mut Criterion) {
    let mut group = c.benchmark_group("refine_mask");
    for size in [128, 512] {
        let raw = blob_mask(size, size);
        let r = size / 64;
        let sigma = size as f64 / 128.0;
        group.bench_with_input(BenchmarkId::from_parameter(size), &raw, |b, raw| {
            b.iter(|| refine_mask(black_box(raw), 0.5, r, sigma))
        });
    }
    group.finish();
}

fn bench_condition(c: &mut Criterion) {
    let g = synthetic::scene("bench", 512, 512, 1);
    let mask = blob_mask(512, 512);
    c.bench_function("assemble_condition/512", |b| {
        b.iter(|| assemble_condition(black_box(&g), Some(&mask)).unwrap())
    });
}

fn bench_metrics(c: &mut Criterion) {
    let a = textured(256, 256, 0.0);
    let b = textured(256, 256, 0.4);
    let params = SsimParams::default();
    c.bench_function("ssim/256", |bch| {
        bch.iter(|| ssim(black_box(&a), black_box(&b), &params).unwrap())
    });
    c.bench_function("psnr/256", |bch| {
        bch.iter(|| psnr(black_box(&a), black_box(&b), 1.0).unwrap())
    });
}

fn bench_align(c: &mut Criterion) {
    let a = textured(128, 128, 0.0);
    let b = a.translate(3, -2);
    c.bench_function("align_pair/128_s4", |bch| {
        bch.iter(|| align_pair(black_box(&a), black_box(&b), 4).unwrap())
    });
}

criterion_group!(
    benches,
    bench_refine,
    bench_condition,
    bench_metrics,
    bench_align
);
criterion_main!(benches);
