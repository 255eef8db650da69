use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use pix2next::conv::conv2d;
use pix2next::data::Batch;
use pix2next::losses::{ssim_loss, SsimParams};
use pix2next::metrics::{frechet_distance, GaussianStats};
use pix2next::trainer::Trainer;
use pix2next_bench::{toy_config, uniform};

fn convolution(c: &mut Criterion) {
    let x = uniform(&[4, 32, 64, 64]);
    let w = uniform(&[32, 32, 3, 3]);
    c.bench_function("conv2d im2col 32->32 64x64 b4", |b| {
        b.iter(|| conv2d(black_box(&x), &w, 1, 1).unwrap())
    });
    c.bench_function("conv2d builtin 32->32 64x64 b4", |b| {
        b.iter(|| black_box(&x).conv2d(&w, 1, 1, 1, 1).unwrap())
    });
}

fn ssim(c: &mut Criterion) {
    let a = uniform(&[4, 1, 256, 256]);
    let g = uniform(&[4, 1, 256, 256]);
    let p = SsimParams::default();
    c.bench_function("ssim loss 256x256 b4", |b| {
        b.iter(|| ssim_loss(black_box(&a), &g, &p).unwrap())
    });
}

fn generator(c: &mut Criterion) {
    let cfg = toy_config();
    let mut t = Trainer::new(&cfg, cfg.train.iterations).unwrap();
    let rgb = uniform(&[4, 3, 64, 64]);
    c.bench_function("toy generator forward b4", |b| {
        b.iter(|| t.predict(black_box(&rgb)).unwrap())
    });
    let batch = Batch {
        ids: (0..4).map(|i| i.to_string()).collect(),
        rgb,
        target: uniform(&[4, 1, 64, 64]),
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("toy train step b4", |b| b.iter(|| t.train_step(&batch).unwrap()));
    group.finish();
}

fn fid(c: &mut Criterion) {
    let feats = |offset: f64| -> Vec<Vec<f64>> {
        (0..256)
            .map(|i| (0..64).map(|j| ((i * 7 + j * 13) % 97) as f64 / 97.0 + offset).collect())
            .collect()
    };
    let a = GaussianStats::fit(&feats(0.0)).unwrap();
    let b = GaussianStats::fit(&feats(0.1)).unwrap();
    c.bench_function("frechet distance d=64", |bch| {
        bch.iter(|| frechet_distance(&a.mean, &a.cov, black_box(&b.mean), &b.cov).unwrap())
    });
}

criterion_group!(benches, convolution, ssim, generator, fid);
criterion_main!(benches);
