use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use worldforge::dreamer::{dense_attention, windowed_attention, Window};
use worldforge::geometry::{double_reproject, warp_frame, Pose};
use worldforge::Graph;
use worldforge_bench::{desk_model, scene, token_grid, train_sample};

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    for grid in [[3, 4, 4], [3, 8, 8], [5, 8, 8]] {
        let q = token_grid(0, grid, 32);
        let k = token_grid(1, grid, 32);
        let v = token_grid(2, grid, 32);
        let id = format!("{}x{}x{}", grid[0], grid[1], grid[2]);
        group.bench_with_input(BenchmarkId::new("windowed", &id), &grid, |b, _| {
            b.iter(|| windowed_attention(&q, &k, &v, Window::default(), 4).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("dense", &id), &grid, |b, _| {
            b.iter(|| dense_attention(&q, &k, &v, 4).unwrap())
        });
    }
    group.finish();
}

fn moe(c: &mut Criterion) {
    let model = desk_model(0);
    let tokens = token_grid(3, [3, 8, 8], model.config().dim);
    c.bench_function("moe_layer", |b| b.iter(|| model.moe_layer(0, black_box(&tokens)).unwrap()));
}

fn backward(c: &mut Criterion) {
    let model = desk_model(0);
    let sample = train_sample(&model, 0);
    c.bench_function("loss_forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true);
            let (_, _, total) = model.loss(&mut g, &p, &sample).unwrap();
            g.backward(total).unwrap();
            g
        })
    });
}

fn warp(c: &mut Criterion) {
    let s = scene(64, 48);
    let pose = Pose::from_axis_angle(nalgebra::Vector3::y(), 0.05, nalgebra::Vector3::new(0.1, 0.0, 0.02));
    c.bench_function("warp_frame", |b| b.iter(|| warp_frame(&s.frame, &s.depth, black_box(&pose), &s.camera).unwrap()));
    c.bench_function("double_reproject", |b| {
        b.iter(|| double_reproject(&s.frame, &s.depth, black_box(&pose), &s.camera, &s.arm).unwrap())
    });
}

criterion_group!(benches, attention, moe, backward, warp);
criterion_main!(benches);
