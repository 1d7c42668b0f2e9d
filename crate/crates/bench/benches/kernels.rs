use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use geoadapt_bench::{homography_params, random_tensor};
use geoadapt_core::conv::conv2d;
use geoadapt_core::data::{synth_pair, SyntheticDomainSpec};
use geoadapt_core::geometry::{grid_sample, transform_grid, TransformKind};
use geoadapt_core::training::{step_batches, train_step, TrainConfig, TrainData, TrainState};
use geoadapt_core::{grad, ops, Var};

fn conv(c: &mut Criterion) {
    let x = Var::leaf(random_tensor(&[8, 16, 32, 32], 0));
    let w = Var::leaf(random_tensor(&[16, 16, 3, 3], 1));
    c.bench_function("conv3x3_forward_8x16x32x32", |b| {
        b.iter(|| black_box(conv2d(&x, &w, 1, 1)))
    });
    c.bench_function("conv3x3_forward_backward_8x16x32x32", |b| {
        b.iter(|| {
            let y = ops::sum(&conv2d(&x, &w, 1, 1));
            black_box(grad(&y, &[x.clone(), w.clone()], false))
        })
    });
}

fn warp(c: &mut Criterion) {
    let img = Var::leaf(random_tensor(&[8, 3, 32, 32], 2));
    let params = Var::leaf(homography_params(8, 3));
    c.bench_function("homography_warp_forward_8x3x32x32", |b| {
        b.iter(|| {
            let grid = transform_grid(&params, TransformKind::Homography, (32, 32));
            black_box(grid_sample(&img, &grid, 0.0))
        })
    });
    c.bench_function("homography_warp_forward_backward_8x3x32x32", |b| {
        b.iter(|| {
            let grid = transform_grid(&params, TransformKind::Homography, (32, 32));
            let y = ops::sum(&grid_sample(&img, &grid, 0.0));
            black_box(grad(&y, &[img.clone(), params.clone()], false))
        })
    });
}

fn training(c: &mut Criterion) {
    let pair = synth_pair(&SyntheticDomainSpec::default()).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        critic_steps_per_gen: 1,
        ..TrainConfig::default()
    };
    let data = TrainData {
        x: &pair.x,
        y: &pair.y,
        gt: None,
    };
    let (x, y) = step_batches(&cfg, &data, 0);
    let mut state = TrainState::new(&cfg).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step_batch8_critic1", |b| {
        b.iter(|| black_box(train_step(&mut state, &x, &y, &cfg).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, conv, warp, training);
criterion_main!(benches);
