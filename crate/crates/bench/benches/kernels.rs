// SPDX-License-Identifier: MIT OR Apache-2.0

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use vtrace_core::harness::{run_episode, Condition};
use vtrace_core::repr_geometry::{linear_cka, RepresentationMatrix};
use vtrace_core::{build_mask, build_policy, iou90, EnvConfig, GridEnv, Heatmap, ModelConfig, ModelKind};
use vtrace_core::{RegionKind, RegionMask, Rule, Stage};

fn matrix(n: usize, d: usize, salt: usize) -> RepresentationMatrix {
    let data = Array2::from_shape_fn((n, d), |(i, j)| ((i * 31 + j * 17 + salt) % 97) as f64 / 97.0 - 0.5);
    RepresentationMatrix::anonymous(data).unwrap()
}

fn cka(c: &mut Criterion) {
    let mut g = c.benchmark_group("linear_cka");
    for (n, d) in [(64, 32), (256, 64), (1024, 128)] {
        let (x, y) = (matrix(n, d, 0), matrix(n, d, 5));
        g.bench_with_input(BenchmarkId::from_parameter(format!("{n}x{d}")), &(x, y), |b, (x, y)| {
            b.iter(|| linear_cka(black_box(x), black_box(y)).unwrap())
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward");
    let (env, obs) = GridEnv::reset(&EnvConfig::default(), 0).unwrap();
    let instruction = env.instruction();
    for kind in [ModelKind::EarlyFusion, ModelKind::LateFusion] {
        let model = build_policy(kind, ModelConfig::default()).unwrap();
        g.bench_function(kind.as_str(), |b| {
            b.iter(|| model.forward(black_box(&obs), &instruction, None).unwrap())
        });
    }
    g.finish();
}

fn episode(c: &mut Criterion) {
    let model = build_policy(ModelKind::EarlyFusion, ModelConfig::default()).unwrap();
    let cfg = EnvConfig::default();
    c.bench_function("episode/early_fusion", |b| {
        b.iter(|| {
            let (env, _) = GridEnv::reset(&cfg, 3).unwrap();
            run_episode(&model, env, &Condition::baseline(), None).unwrap()
        })
    });
}

fn masks(c: &mut Criterion) {
    let model = build_policy(ModelKind::EarlyFusion, ModelConfig::default()).unwrap();
    let layout = model.layout(1).unwrap();
    c.bench_function("build_mask/gen_no_image", |b| {
        b.iter(|| {
            build_mask(
                black_box(&layout.partition),
                Stage::Generation,
                Rule::NoImage,
                model.regime(),
                0,
            )
            .unwrap()
        })
    });
}

fn localization(c: &mut Criterion) {
    let values: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64).collect();
    let h = Heatmap::new(values, (8, 8)).unwrap();
    let m = RegionMask::new([9, 10, 17, 18], RegionKind::Target, 64).unwrap();
    c.bench_function("iou90/8x8", |b| b.iter(|| iou90(black_box(&h), &m)));
}

criterion_group!(benches, cka, forward, episode, masks, localization);
criterion_main!(benches);
