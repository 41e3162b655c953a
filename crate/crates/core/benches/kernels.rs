use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use protodiff::diffusion::{sample_many, DenoiserConfig, DenoiserNet, NoiseSchedule};
use protodiff::tensor::kernels::{self, ConvGeometry};
use protodiff::{rng, Execution, Tensor};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn conv(c: &mut Criterion) {
    let g = ConvGeometry {
        batch: 8,
        in_channels: 32,
        height: 32,
        width: 32,
        out_channels: 32,
        kernel_h: 3,
        kernel_w: 3,
        stride: 1,
        padding: 1,
    };
    let mut r = rng::seeded(0);
    let input = Tensor::randn([8 * 32 * 32 * 32], &mut r).into_data();
    let kernel = Tensor::randn([32 * 32 * 9], &mut r).into_data();
    let grad = Tensor::randn([8 * 32 * 32 * 32], &mut r).into_data();
    let mut group = c.benchmark_group("conv2d 8x32x32x32");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| kernels::conv2d_forward(black_box(&input), black_box(&kernel), &g, exec))
        });
        group.bench_function(BenchmarkId::new("backward_input", name), |b| {
            b.iter(|| kernels::conv2d_backward_input(black_box(&grad), black_box(&kernel), &g, exec))
        });
        group.bench_function(BenchmarkId::new("backward_kernel", name), |b| {
            b.iter(|| kernels::conv2d_backward_kernel(black_box(&grad), black_box(&input), &g, exec))
        });
    }
    group.finish();
}

fn dense(c: &mut Criterion) {
    let mut r = rng::seeded(1);
    let a = Tensor::randn([256 * 256], &mut r).into_data();
    let b = Tensor::randn([256 * 256], &mut r).into_data();
    let feats = Tensor::randn([2048 * 16], &mut r).into_data();
    let protos = Tensor::randn([10 * 16], &mut r).into_data();
    let mut group = c.benchmark_group("dense");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("matmul 256", name), |bn| {
            bn.iter(|| kernels::matmul(black_box(&a), black_box(&b), 256, 256, 256, exec))
        });
        group.bench_function(BenchmarkId::new("pairwise 2048x10x16", name), |bn| {
            bn.iter(|| kernels::pairwise_sq_dist(black_box(&feats), black_box(&protos), 2048, 10, 16, exec))
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let net = DenoiserNet::new(DenoiserConfig { base_width: 8, time_dim: 16 }, &mut rng::seeded(2));
    let schedule = NoiseSchedule::scaled_linear(10).unwrap();
    let masks = vec![Tensor::from_fn([16, 16], |i| ((i / 16) % 2) as f64); 8];
    let mut group = c.benchmark_group("sample_many 8x16x16 T=10");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| sample_many(&net, black_box(&masks), &schedule, 3, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, conv, dense, sampling);
criterion_main!(benches);
