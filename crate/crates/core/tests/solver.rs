use std::sync::Arc;

use approx::assert_abs_diff_eq;
use mfgc_core::hamiltonian::{Lagrangian, ModelMeta, ReducedHamiltonian};
use mfgc_core::measures::{DensityGrid1d, ParticleEnsemble};
use mfgc_core::models::LqModel;
use mfgc_core::oracle::RiccatiOracle;
use mfgc_core::solver::particle::{common_noise_runs, pooled_moments};
use mfgc_core::solver::{
    best_response_gap, equilibrium_picard, solve_particle_fbsde, GridSpec, McConfig, ParticleConfig, Seeds,
    SolverConfig, TimeGrid,
};

/// `b = 0`, `f = a^2 / 2`, `G = x`: `H^ = 0` and `u(t, x) = x`.
#[derive(Debug)]
struct Null {
    beta: f64,
}

impl Lagrangian for Null {
    fn name(&self) -> &str {
        "null"
    }
    fn dim(&self) -> usize {
        1
    }
    fn meta(&self) -> ModelMeta {
        ModelMeta {
            beta: self.beta,
            lambda: 0.0,
            c0: 1.0,
            c1: 1e-3,
        }
    }
    fn law_features(&self, _states: &[f64], _controls: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    fn drift(&self, _x: &[f64], _a: &[f64], _f: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn running_cost(&self, _x: &[f64], a: &[f64], _f: &[f64]) -> f64 {
        0.5 * a[0] * a[0]
    }
    fn h_grad_a(&self, _x: &[f64], _p: &[f64], a: &[f64], _f: &[f64], out: &mut [f64]) -> bool {
        out[0] = a[0];
        true
    }
    fn h_hess_a(&self, _x: &[f64], _p: &[f64], _a: &[f64], _f: &[f64], out: &mut [f64]) -> bool {
        out[0] = 1.0;
        true
    }
    fn terminal_features(&self, _states: &[f64]) -> Vec<f64> {
        Vec::new()
    }
    fn terminal_cost(&self, x: &[f64], _f: &[f64]) -> f64 {
        x[0]
    }
    fn terminal_grad(&self, _x: &[f64], _f: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn terminal_hess(&self, _x: &[f64], _f: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
}

fn reduced(m: impl Lagrangian + 'static) -> ReducedHamiltonian {
    ReducedHamiltonian::new(Arc::new(m))
}

fn setup(nx: usize, nt: usize, mean: f64) -> (GridSpec, DensityGrid1d) {
    let grid = GridSpec::around(mean, 1.0, 0.0, nx, 0.0, 1.0, nt).unwrap();
    let mu0 = DensityGrid1d::gaussian(grid.x_min, grid.x_max, nx, mean, 1.0).unwrap();
    (grid, mu0)
}

#[test]
fn null_model_keeps_linear_profiles_and_diffuses() {
    let (grid, mu0) = setup(161, 200, 0.0);
    let sol = equilibrium_picard(&reduced(Null { beta: 0.0 }), &mu0, &grid, &SolverConfig::default(), None).unwrap();
    assert!(sol.converged);
    let xs = grid.xs();
    for u in &sol.u {
        for (v, x) in u.iter().zip(&xs) {
            assert_abs_diff_eq!(*v, *x, epsilon = 1e-9);
        }
    }
    // Terminal condition holds bitwise.
    assert_eq!(sol.u[grid.steps()], xs);
    // Heat kernel: Var(t) = Var(0) + t.
    let v0 = mu0.variance();
    for (n, mu) in sol.mu.iter().enumerate() {
        assert_abs_diff_eq!(mu.mass(), 1.0, epsilon = 1e-8);
        assert!(mu.values().iter().all(|&v| v >= 0.0));
        assert_abs_diff_eq!(mu.variance(), v0 + grid.t(n), epsilon = 2e-3);
    }
    assert!(sol.max_mass_drift <= 1e-10);
}

#[test]
fn odd_drift_keeps_a_symmetric_law_centred() {
    let (grid, mu0) = setup(121, 100, 0.0);
    let sol = equilibrium_picard(&reduced(LqModel::uncoupled()), &mu0, &grid, &SolverConfig::default(), None).unwrap();
    for mu in &sol.mu {
        assert!(mu.mean().abs() <= 1e-10, "mean {}", mu.mean());
    }
}

#[test]
fn decoupled_problem_is_solved_by_the_first_pass() {
    let (grid, mu0) = setup(81, 50, 0.5);
    let rh = reduced(LqModel::uncoupled());
    let one = SolverConfig {
        max_outer: 1,
        ..SolverConfig::default()
    };
    let first = equilibrium_picard(&rh, &mu0, &grid, &one, None).unwrap();
    let full = equilibrium_picard(&rh, &mu0, &grid, &SolverConfig::default(), None).unwrap();
    assert!(full.converged);
    assert_eq!(first.u, full.u);
    assert_eq!(first.mu, full.mu);
}

#[test]
fn empty_horizon_returns_the_data() {
    let grid = GridSpec::new(-6.0, 7.0, 65, 1.0, 1.0, 10).unwrap();
    let mu0 = DensityGrid1d::gaussian(-6.0, 7.0, 65, 0.5, 1.0).unwrap();
    let lq = LqModel::coupled();
    let sol = equilibrium_picard(&reduced(lq), &mu0, &grid, &SolverConfig::default(), None).unwrap();
    assert_eq!(sol.u.len(), 1);
    assert_eq!(sol.mu[0], mu0);
    let m = sol.terminal_features[0];
    for (v, x) in sol.u[0].iter().zip(grid.xs()) {
        assert_eq!(*v, 0.5 * lq.g * x * x + lq.s * x * m);
    }
}

#[test]
fn coupled_lq_matches_the_riccati_oracle() {
    let (grid, mu0) = setup(400, 2000, 0.5);
    let cfg = SolverConfig {
        damping: 0.5,
        ..SolverConfig::default()
    };
    let sol = equilibrium_picard(&reduced(LqModel::coupled()), &mu0, &grid, &cfg, None).unwrap();
    assert!(sol.converged && sol.iterations <= 50, "{} iterations", sol.iterations);
    assert!(*sol.residuals.last().unwrap() <= 1e-6);
    let o = RiccatiOracle::new(LqModel::coupled(), 0.0, 1.0).unwrap();
    let flow = o.moments(mu0.mean(), mu0.variance());
    for (n, mu) in sol.mu.iter().enumerate() {
        let t = grid.t(n);
        assert_abs_diff_eq!(mu.mean(), flow.mean(t), epsilon = 1e-3);
        assert_abs_diff_eq!(mu.variance(), flow.variance(t), epsilon = 1e-3);
    }
}

fn normal_ensemble(n: usize, mean: f64, seed: u64) -> ParticleEnsemble {
    let grid = DensityGrid1d::gaussian(mean - 8.0, mean + 8.0, 801, mean, 1.0).unwrap();
    grid.sample(n, seed).unwrap()
}

#[test]
fn particle_null_model_is_brownian() {
    let beta = 0.5;
    let xi = normal_ensemble(500, 0.0, 3);
    let tg = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let runs = common_noise_runs(&reduced(Null { beta }), &xi, &tg, Seeds::from_run(11), 64, &ParticleConfig::default())
        .unwrap();
    let n = tg.steps();
    // Unconditional variance: pooled over common-noise paths.
    let want = xi.variance()[0] + (1.0 + beta * beta) * 1.0;
    let (_, var, _, se) = pooled_moments(&runs, n);
    assert!((var - want).abs() <= 3.0 * se, "{var} vs {want} (se {se})");
    // Y is the constant slope of G.
    for y in runs.iter().flat_map(|p| &p.y) {
        for v in y {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-9);
        }
    }
}

#[test]
fn particle_lq_moments_match_the_oracle() {
    let lq = LqModel::coupled();
    let xi = normal_ensemble(20_000, 0.5, 5);
    let tg = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let paths = solve_particle_fbsde(&reduced(lq), &xi, &tg, Seeds::from_run(7), &ParticleConfig::default()).unwrap();
    assert!(paths.converged);
    let o = RiccatiOracle::new(lq, 0.0, 1.0).unwrap();
    let flow = o.moments(xi.mean()[0], xi.variance()[0]);
    let n = xi.len() as f64;
    for k in [25, 50, 100] {
        let (m, v) = (paths.mean(k), paths.variance(k));
        let t = tg.t(k);
        // Sampling error of the Brownian part plus the O(dt) Euler bias.
        let se_m = (v / n).sqrt();
        let se_v = v * (2.0 / n).sqrt();
        assert!((m - flow.mean(t)).abs() <= 3.0 * se_m + 1e-3, "mean at {t}: {m} vs {}", flow.mean(t));
        assert!((v - flow.variance(t)).abs() <= 3.0 * se_v + 1e-2, "variance at {t}: {v} vs {}", flow.variance(t));
    }
}

#[test]
fn best_response_gap_examples() {
    let (grid, mu0) = setup(200, 250, 0.5);
    let rh = reduced(LqModel::coupled());
    let sol = equilibrium_picard(&rh, &mu0, &grid, &SolverConfig::default(), None).unwrap();
    let mc = McConfig {
        paths: 2000,
        steps: 250,
        seed: 1,
    };
    let zero = best_response_gap(&rh, &sol, &|_, _| 0.0, &mc).unwrap();
    assert_eq!((zero.gap, zero.std_error), (0.0, 0.0));

    // Leading order: |delta|^2 (T - t0) / 2 for a constant shift delta.
    let shift = best_response_gap(&rh, &sol, &|_, _| 0.1, &mc).unwrap();
    assert!(shift.gap > 0.0);
    assert!((shift.gap - 0.005).abs() <= 0.05 * 0.005, "gap {}", shift.gap);
}
