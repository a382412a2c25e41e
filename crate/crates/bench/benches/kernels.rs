use std::hint::black_box;

use bno_bench::{darcy, features, grid_1d, helmholtz_observations, rule};
use bno_core::gp::{posterior_zero_mean, KernelSpec};
use bno_core::laplace::{log_marginal_likelihood, tune_hyperparameters, HyperGrid, LastLayerFeatures};
use bno_core::operator::{gradient, kernel_on_grid, loss, Architecture, NeuralOperatorParams};
use bno_core::Grid2D;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn kernel_network(c: &mut Criterion) {
    let p = NeuralOperatorParams::init(Architecture::one_layer_linear(1, vec![64, 64]), 0).unwrap();
    let mut group = c.benchmark_group("kernel_on_grid");
    for k in [17, 65] {
        let g = grid_1d(k);
        group.bench_with_input(BenchmarkId::from_parameter(k), &g, |b, g| {
            b.iter(|| kernel_on_grid(&p, black_box(g), g).unwrap())
        });
    }
    group.finish();
}

fn darcy_operator(c: &mut Criterion) {
    let data = darcy(4, 16);
    let r = rule(16, 2);
    let arch = Architecture::darcy(vec![16, 16], 8, 2, (3.0, 12.0));
    let p = NeuralOperatorParams::init(arch, 0).unwrap();
    let mut group = c.benchmark_group("darcy_16x16_4_samples");
    group.sample_size(10);
    group.bench_function("loss", |b| b.iter(|| loss(&p, data.samples(), &r, 1e-8).unwrap()));
    group.bench_function("gradient", |b| b.iter(|| gradient(&p, data.samples(), &r, 1e-8).unwrap()));
    group.finish();
}

fn gp_posterior(c: &mut Criterion) {
    let spec = KernelSpec::default();
    let mut group = c.benchmark_group("gp_posterior");
    group.sample_size(10);
    for k in [9, 17] {
        let obs = helmholtz_observations(k, 8, 1e-8);
        let g = grid_1d(k);
        let eval = Grid2D::new(g.as_1d().unwrap().clone(), g.as_1d().unwrap().clone());
        group.bench_with_input(BenchmarkId::from_parameter(k), &obs, |b, obs| {
            b.iter(|| posterior_zero_mean(&spec, black_box(obs), &eval).unwrap())
        });
    }
    group.finish();
}

fn laplace(c: &mut Criterion) {
    let f = LastLayerFeatures::new(features(25_600, 17)).unwrap();
    let y: Vec<f64> = (0..25_600).map(|i| (i as f64 * 0.01).sin()).collect();
    c.bench_function("laplace_evidence_25600x17", |b| {
        b.iter(|| log_marginal_likelihood(&f, black_box(&y), 1.0, 1e-3).unwrap())
    });
    let grid = HyperGrid::default();
    let mut group = c.benchmark_group("laplace_tuning");
    group.sample_size(10);
    group.bench_function("25600x17", |b| b.iter(|| tune_hyperparameters(&f, &y, &grid).unwrap()));
    group.finish();
}

criterion_group!(benches, kernel_network, darcy_operator, gp_posterior, laplace);
criterion_main!(benches);
