//! Benchmarks for the hot paths: the thin SVD, the adjusted test
//! pipeline, and one full Monte Carlo cell.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pcrlab_core::models::{
    gen_exposure_linear, gen_outcome, gen_spiked, make_beta, CoefficientContext, CoefficientSpec,
    RandomKind, SpikeSpec,
};
use pcrlab_core::pcr::{run_test, Variant};
use pcrlab_core::{run_cell, thin_svd, ExperimentConfig};

fn bench_thin_svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("thin_svd");
    for &(n, p) in &[(200usize, 100usize), (100, 200), (400, 200)] {
        let spec = SpikeSpec::canonical(&[4.0], p);
        let w = gen_spiked(n, p, &spec, 7).expect("generation succeeds");
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{n}x{p}")),
            &w,
            |b, w| b.iter(|| thin_svd(w).expect("decomposition succeeds")),
        );
    }
    group.finish();
}

fn bench_run_test(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_test");
    for &(n, p) in &[(200usize, 100usize), (400, 200)] {
        let spec = SpikeSpec::canonical(&[4.0], p);
        let w = gen_spiked(n, p, &spec, 7).expect("generation succeeds");
        let ctx = CoefficientContext::dimension(p);
        let random = CoefficientSpec::Random {
            sigma2: 1.0,
            kind: RandomKind::Gaussian,
        };
        let theta = make_beta(&random, &ctx, 8).expect("coefficient succeeds");
        let beta = make_beta(&random, &ctx, 9).expect("coefficient succeeds");
        let a = gen_exposure_linear(&w, &theta, 1.0, 10).expect("exposure succeeds");
        let y = gen_outcome(&a, &w, &beta, 0.0, 1.0, 11).expect("outcome succeeds");
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{n}x{p}")),
            &(y, a, w),
            |b, (y, a, w)| {
                b.iter(|| run_test(y, a, w, 1, Variant::Out, 0.05).expect("test succeeds"))
            },
        );
    }
    group.finish();
}

fn bench_run_cell(c: &mut Criterion) {
    let config = ExperimentConfig {
        n: 100,
        p: 200,
        reps: 4,
        tau0_grid: vec![0.0, 0.5, 1.0],
        ..Default::default()
    };
    c.bench_function("run_cell_desk_dims", |b| {
        let mut rep = 0usize;
        b.iter(|| {
            rep += 1;
            run_cell(&config, 0.5, rep).expect("cell succeeds")
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_thin_svd, bench_run_test, bench_run_cell
}
criterion_main!(benches);
