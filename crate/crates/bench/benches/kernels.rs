use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfgc_core::hamiltonian::ReducedHamiltonian;
use mfgc_core::measures::{wasserstein, DensityGrid1d, JointEnsemble, Order, ParticleEnsemble};
use mfgc_core::models::{AnharmonicModel, LqModel};
use mfgc_core::solver::{equilibrium_picard, GridSpec, SolverConfig};

fn ensemble(n: usize, seed: u64) -> ParticleEnsemble {
    DensityGrid1d::gaussian(-8.0, 8.0, 401, 0.0, 1.0).unwrap().sample(n, seed).unwrap()
}

fn transport(c: &mut Criterion) {
    let mut g = c.benchmark_group("wasserstein");
    for n in [64, 1024, 16_384] {
        let (a, b) = (ensemble(n, 1), ensemble(n, 2));
        g.bench_with_input(BenchmarkId::new("sorted-w2", n), &n, |bch, _| {
            bch.iter(|| wasserstein(Order::W2, black_box(&a), black_box(&b)).unwrap())
        });
    }
    // d = 2 goes through the assignment solver.
    for n in [8, 32, 64] {
        let pts = |seed| {
            let v = ensemble(2 * n, seed).into_vec();
            ParticleEnsemble::new(2, v).unwrap()
        };
        let (a, b) = (pts(3), pts(4));
        g.bench_with_input(BenchmarkId::new("assignment-w2-d2", n), &n, |bch, _| {
            bch.iter(|| wasserstein(Order::W2, black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn fixed_point(c: &mut Criterion) {
    let mut g = c.benchmark_group("fixed-point");
    let states = ensemble(64, 5).into_vec();
    let seconds = ensemble(64, 6).into_vec();
    let rho = JointEnsemble::new(1, states, seconds).unwrap();
    let lq = ReducedHamiltonian::new(Arc::new(LqModel::coupled()));
    g.bench_function("lq-64", |bch| bch.iter(|| lq.fixed_point(black_box(&rho), None).unwrap()));
    let anh = ReducedHamiltonian::new(Arc::new(AnharmonicModel::new(LqModel::coupled(), 0.5)));
    g.bench_function("anharmonic-64", |bch| bch.iter(|| anh.fixed_point(black_box(&rho), None).unwrap()));
    g.finish();
}

fn grid_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("grid-solve");
    g.sample_size(10);
    let rh = ReducedHamiltonian::new(Arc::new(LqModel::coupled()));
    let grid = GridSpec::around(0.5, 1.0, 0.0, 100, 0.0, 1.0, 125).unwrap();
    let mu0 = DensityGrid1d::gaussian(grid.x_min, grid.x_max, grid.nx, 0.5, 1.0).unwrap();
    let cfg = SolverConfig {
        damping: 1.0,
        ..SolverConfig::default()
    };
    g.bench_function("lq-coupled-100x125", |bch| {
        bch.iter(|| equilibrium_picard(&rh, black_box(&mu0), &grid, &cfg, None).unwrap())
    });
    g.finish();
}

criterion_group!(benches, transport, fixed_point, grid_solve);
criterion_main!(benches);
