use std::sync::Arc;

use approx::assert_abs_diff_eq;
use mfgc_core::hamiltonian::ReducedHamiltonian;
use mfgc_core::measures::{DensityGrid1d, Order, ParticleEnsemble};
use mfgc_core::models::LqModel;
use mfgc_core::oracle::RiccatiOracle;
use mfgc_core::solver::SolverConfig;
use mfgc_core::value::{
    lipschitz_estimate, master_residual, propagation_check, semigroup_check, xmu_derivative_fd, FdConfig, InitialLaw,
    Method, PropagationConfig, PropagationKind, ValueConfig, ValueQuery, ValueSolver,
};

fn solver(lq: LqModel, nx: usize, dt: f64) -> ValueSolver {
    let cfg = ValueConfig {
        nx,
        dt,
        solver: SolverConfig {
            damping: 1.0,
            max_outer: 200,
            tol_out: 1e-10,
            projection: 64,
        },
        ..ValueConfig::default()
    };
    ValueSolver::new(ReducedHamiltonian::new(Arc::new(lq)), cfg).unwrap()
}

fn gaussian(mean: f64, std: f64) -> DensityGrid1d {
    DensityGrid1d::gaussian(mean - 8.0 * std, mean + 8.0 * std, 201, mean, std).unwrap()
}

fn query(t0: f64, x: f64, mu0: DensityGrid1d) -> ValueQuery {
    ValueQuery {
        t0,
        x,
        mu0: InitialLaw::Density(mu0),
        method: Method::Grid,
    }
}

fn ensemble(xs: &[f64]) -> ParticleEnsemble {
    ParticleEnsemble::from_scalars(xs.to_vec()).unwrap()
}

const NULL: LqModel = LqModel {
    k: 0.0,
    q: 0.0,
    r: 0.0,
    g: 0.0,
    s: 0.0,
    beta: 0.0,
    lambda: 0.0,
};

#[test]
fn value_at_the_horizon_is_the_terminal_cost() {
    let lq = LqModel::coupled();
    let s = solver(lq, 120, 5e-3);
    let mu0 = gaussian(0.5, 1.0);
    let m = mu0.quantile_projection(64).unwrap().mean()[0];
    for x in [-1.0, 0.3, 2.0] {
        let p = s.evaluate(&query(1.0, x, mu0.clone())).unwrap();
        assert_abs_diff_eq!(p.value, 0.5 * lq.g * x * x + lq.s * x * m, epsilon = 1e-9);
        assert_abs_diff_eq!(p.gradient, lq.g * x + lq.s * m, epsilon = 1e-6);
    }
}

#[test]
fn null_problem_has_zero_value() {
    let s = solver(NULL, 80, 1e-2);
    let p = s.evaluate(&query(0.0, 0.7, gaussian(0.0, 1.0))).unwrap();
    assert_eq!((p.value, p.gradient), (0.0, 0.0));
}

#[test]
fn lq_value_and_gradient_match_riccati() {
    let lq = LqModel::coupled();
    let s = solver(lq, 200, 1e-3);
    let o = RiccatiOracle::new(lq, 0.0, 1.0).unwrap();
    let mu0 = gaussian(0.0, 1.0);
    let p = s.evaluate(&query(0.0, 1.0, mu0.clone())).unwrap();
    assert!(p.converged);
    assert_abs_diff_eq!(p.value, o.value(0.0, 1.0, mu0.mean()), epsilon = 5e-3);
    assert_abs_diff_eq!(p.gradient, o.a(0.0) + o.b(0.0) * mu0.mean(), epsilon = 5e-3);
}

#[test]
fn symmetric_problem_has_a_flat_centre() {
    let s = solver(LqModel::uncoupled(), 121, 1e-2);
    let p = s.evaluate(&query(0.0, 0.0, gaussian(0.0, 1.0))).unwrap();
    assert!(p.gradient.abs() <= 1e-6, "{}", p.gradient);
}

#[test]
fn semigroup_endpoints_are_exact() {
    let s = solver(LqModel::coupled(), 120, 1e-2);
    let mu0 = gaussian(0.5, 1.0);
    for t1 in [0.0, 1.0] {
        let r = semigroup_check(&s, &mu0, 0.0, t1, None).unwrap();
        assert!(r.report.discrepancy <= 1e-12, "t1 = {t1}: {}", r.report.discrepancy);
    }
}

#[test]
fn lipschitz_skips_identical_pairs() {
    let s = solver(LqModel::coupled(), 80, 1e-2);
    let mu = ensemble(&[-0.5, 0.1, 0.4, 1.2]);
    let r = lipschitz_estimate(&s, Order::W2, &[(mu.clone(), mu)], 0.5).unwrap();
    assert_eq!(r.skipped, vec![0]);
    assert!(r.ratios.is_empty() && r.max_ratio.is_none());
}

#[test]
fn measure_independent_model_has_no_xmu_derivative_or_residual_measure_term() {
    let lq = LqModel::uncoupled();
    let s = solver(lq, 80, 1e-2);
    let rh = s.hamiltonian().clone();
    let mu = ensemble(&[-0.9, -0.2, 0.3, 0.8, 1.4, 0.1, -1.3, 0.6]);
    let field = s.field(&mu).unwrap();
    let r = xmu_derivative_fd(&field, &rh, 0.5, &mu, &[0, 3], &[-1.0, 0.5], &FdConfig::default()).unwrap();
    assert!(r.max_abs <= 1e-6, "{}", r.max_abs);

    let null = solver(NULL, 80, 1e-2);
    let field = null.field(&mu).unwrap();
    let res = master_residual(&field, null.hamiltonian(), 0.5, &[-1.0, 0.0, 1.0], &mu, &FdConfig::default()).unwrap();
    assert!(res.max_abs <= 1e-12, "{}", res.max_abs);
}

#[test]
fn propagation_of_identical_pairs_is_zero() {
    let s = solver(LqModel::lasry_lions_fixture(), 80, 1e-2);
    let m = DensityGrid1d::gaussian(-14.0, 14.0, 80, 0.3, 1.0).unwrap();
    let cfg = PropagationConfig {
        precheck_trials: 20,
        ..PropagationConfig::default()
    };
    let r = propagation_check(&s, PropagationKind::LasryLions, &[(m.clone(), m)], 0.0, &cfg).unwrap();
    assert!(r.gaps.iter().all(|g| g.abs() <= 1e-12), "{:?}", r.gaps);
    assert!(r.pass);
}
