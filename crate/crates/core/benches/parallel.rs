//! Sequential against rayon execution for the time-axis kernels.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use driftica::compnet::{CompNetConfig, CompensationNetwork};
use driftica::contrast::renormalize;
use driftica::modulation::{contrast_pass, modulated_trace, ModulationGrid};
use driftica::preprocess::mean_and_covariance;
use driftica::Execution;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::hint::black_box;

const DIM: usize = 160;
const LEN: usize = 30 * 2048;
const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn data() -> (Array1<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Array2::from_shape_simple_fn((DIM, LEN), || StandardNormal.sample(&mut rng));
    let w = renormalize(Array1::from_shape_fn(DIM, |i| 1.0 + (i % 7) as f64).view()).unwrap();
    (w, x)
}

fn kernels(c: &mut Criterion) {
    let (w, x) = data();
    let fracs = [1.0, 0.5, 0.25];
    let net = CompensationNetwork::new(fracs.len(), DIM, CompNetConfig::default(), 1).unwrap();
    let grid = ModulationGrid::evaluate(&net, &fracs, LEN, 16, Execution::Sequential).unwrap();

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("covariance", name), &exec, |b, &exec| {
            b.iter(|| mean_and_covariance(black_box(x.view()), exec))
        });
        g.bench_with_input(BenchmarkId::new("contrast", name), &exec, |b, &exec| {
            b.iter(|| contrast_pass(w.view(), black_box(x.view()), None, 4, Some(30), exec).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("modulated_contrast", name), &exec, |b, &exec| {
            b.iter(|| contrast_pass(w.view(), black_box(x.view()), Some(&grid), 4, Some(30), exec).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("modulated_trace", name), &exec, |b, &exec| {
            b.iter(|| modulated_trace(w.view(), black_box(x.view()), Some(&grid), exec).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("grid", name), &exec, |b, &exec| {
            b.iter(|| ModulationGrid::evaluate(&net, &fracs, LEN, 16, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
