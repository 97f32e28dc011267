use std::sync::Arc;

use approx::assert_abs_diff_eq;
use mfgc_core::hamiltonian::{
    concavity_probe, h_value, hamiltonian_min, lions_derivative_fd, Lagrangian, ProbeSample, ReducedHamiltonian, Scheme,
    Slot,
};
use mfgc_core::measures::JointEnsemble;
use mfgc_core::models::{AnharmonicModel, LqModel};
use proptest::prelude::*;

fn lq(k: f64, q: f64, r: f64) -> LqModel {
    LqModel {
        k,
        q,
        r,
        g: 1.0,
        s: 0.0,
        beta: 0.0,
        lambda: 0.0,
    }
}

fn reduced(m: LqModel) -> ReducedHamiltonian {
    ReducedHamiltonian::new(Arc::new(m))
}

fn joint(pairs: &[(f64, f64)]) -> JointEnsemble {
    JointEnsemble::from_pairs_1d(pairs).unwrap()
}

/// Grid search over `[-10, 10]` with step 1e-4, then golden-section polish
/// on the bracketing cell.
fn grid_search(model: &dyn Lagrangian, x: f64, p: f64, features: &[f64]) -> (f64, f64) {
    let h = |a: f64| h_value(model, &[x], &[p], &[a], features);
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=200_000 {
        let a = -10.0 + 1e-4 * i as f64;
        let v = h(a);
        if v < best.0 {
            best = (v, a);
        }
    }
    let (mut lo, mut hi) = (best.1 - 1e-4, best.1 + 1e-4);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let (c, d) = (hi - r * (hi - lo), lo + r * (hi - lo));
        if h(c) < h(d) {
            hi = d;
        } else {
            lo = c;
        }
    }
    let a = 0.5 * (lo + hi);
    (h(a), a)
}

#[test]
fn hamiltonian_min_examples() {
    let nu = joint(&[(0.3, 2.0), (-1.0, 0.5)]);
    let m = lq(0.0, 0.0, 0.0);
    let (h, a) = hamiltonian_min(&m, &[0.0], &[1.0], &nu).unwrap();
    let (ho, ao) = grid_search(&m, 0.0, 1.0, &m.law_features(nu.states(), nu.seconds()));
    assert_abs_diff_eq!(h, -0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(a[0], -1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(h, ho, epsilon = 1e-10);
    assert_abs_diff_eq!(a[0], ao, epsilon = 1e-6);

    let (h, a) = hamiltonian_min(&m, &[0.4], &[0.0], &nu).unwrap();
    assert_eq!((h, a[0]), (0.0, 0.0));

    // Control mean zero, so the interaction term vanishes.
    let nu0 = joint(&[(0.0, 1.0), (1.0, -1.0)]);
    let (h, a) = hamiltonian_min(&lq(0.5, 0.0, 0.0), &[0.0], &[1.0], &nu0).unwrap();
    assert_abs_diff_eq!(h, -0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(a[0], -1.0, epsilon = 1e-12);
}

#[test]
fn derivative_free_minimizer_matches_grid_search() {
    let m = AnharmonicModel::new(LqModel::coupled(), 0.5);
    let nu = joint(&[(0.3, 0.2), (-1.0, -0.5), (0.8, 1.1)]);
    let f = m.law_features(nu.states(), nu.seconds());
    for (x, p) in [(0.7, -0.4), (-2.0, 3.0), (0.0, 0.0)] {
        let (h, a) = hamiltonian_min(&m, &[x], &[p], &nu).unwrap();
        let (ho, ao) = grid_search(&m, x, p, &f);
        assert_abs_diff_eq!(h, ho, epsilon = 1e-10);
        assert_abs_diff_eq!(a[0], ao, epsilon = 1e-6);
    }
}

#[test]
fn fixed_point_examples() {
    // No interaction: controls are -p.
    let rho = joint(&[(0.1, 0.5), (-0.4, 1.5), (2.0, -3.0)]);
    let fp = reduced(lq(0.0, 1.0, 0.2)).fixed_point(&rho, None).unwrap();
    assert_eq!(fp.nu.seconds(), &[-0.5, -1.5, 3.0]);
    assert!(fp.iterations <= 2, "{} iterations", fp.iterations);

    // Linear fixed point a_i = -(p_i - kappa pbar), abar = -pbar / (1 + k).
    let rho = joint(&[(0.0, 0.5), (1.0, 1.5)]);
    let fp = reduced(lq(0.5, 1.0, 0.2)).fixed_point(&rho, None).unwrap();
    let a = fp.nu.seconds();
    assert_abs_diff_eq!(a[0], -1.0 / 6.0, epsilon = 1e-12);
    assert_abs_diff_eq!(a[1], -7.0 / 6.0, epsilon = 1e-12);
    assert_abs_diff_eq!(0.5 * (a[0] + a[1]), -2.0 / 3.0, epsilon = 1e-12);
    assert!(fp.residual <= 1e-12);
    assert_eq!(fp.nu.states(), rho.states());

    let single = reduced(lq(0.5, 0.0, 0.0)).fixed_point(&joint(&[(0.0, 2.0)]), None).unwrap();
    assert_abs_diff_eq!(single.nu.seconds()[0], -4.0 / 3.0, epsilon = 1e-12);
}

#[test]
fn reduced_hamiltonian_examples() {
    let rho = joint(&[(0.2, 0.5), (-0.7, 1.5)]);
    let free = reduced(lq(0.0, 0.0, 0.0));
    for p in [-2.0, 0.3, 1.0] {
        assert_abs_diff_eq!(free.value(&[0.4], &[p], &rho).unwrap(), -0.5 * p * p, epsilon = 1e-12);
    }
    // pbar = 1, kappa = 1/3.
    let v = reduced(lq(0.5, 0.0, 0.0)).value(&[0.0], &[1.0], &rho).unwrap();
    assert_abs_diff_eq!(v, -2.0 / 9.0, epsilon = 1e-12);

    let still = joint(&[(0.2, 0.0), (-0.7, 0.0)]);
    assert_eq!(reduced(lq(0.5, 0.0, 0.0)).value(&[0.3], &[0.0], &still).unwrap(), 0.0);
}

#[test]
fn reduced_gradient_examples() {
    let rho = joint(&[(0.2, 0.5), (-0.7, 1.5)]);
    let (_, dp) = reduced(lq(0.0, 0.0, 0.0)).grad(&[0.4], &[0.8], &rho).unwrap();
    assert_abs_diff_eq!(dp[0], -0.8, epsilon = 1e-6);
    let (dx, _) = reduced(lq(0.0, 1.0, 0.0)).grad(&[0.4], &[0.8], &rho).unwrap();
    assert_abs_diff_eq!(dx[0], 0.4, epsilon = 1e-6);

    // The anharmonic model has no callbacks: finite differences throughout.
    let m = AnharmonicModel::new(LqModel::coupled(), 0.6);
    let (dx, dp) = reduced(LqModel::coupled()).grad(&[0.9], &[0.8], &rho).unwrap();
    let (dxa, dpa) = ReducedHamiltonian::new(Arc::new(m)).grad(&[0.9], &[0.8], &rho).unwrap();
    assert_abs_diff_eq!(dpa[0], dp[0], epsilon = 1e-6);
    assert_abs_diff_eq!(dxa[0] - dx[0], 0.6 * 0.9f64.powi(3) / 3.0, epsilon = 1e-6);
}

#[test]
fn lions_derivative_examples() {
    let rho = joint(&[(0.2, 0.5), (-0.7, 1.5), (1.1, 1.0)]);
    let mean_p = |r: &JointEnsemble| Ok(r.second_mean()[0]);
    for scheme in [Scheme::Forward, Scheme::Central] {
        let d = lions_derivative_fd(mean_p, &rho, 1, 0, Slot::Second, 1e-5, scheme).unwrap();
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-9);
        let c = lions_derivative_fd(|_| Ok(3.0), &rho, 0, 0, Slot::State, 1e-5, scheme).unwrap();
        assert_eq!(c, 0.0);
    }
    // kappa (p - kappa pbar) with kappa = 1/3, p = pbar = 1.
    let rh = reduced(lq(0.5, 0.0, 0.0));
    let h = |r: &JointEnsemble| rh.value(&[0.0], &[1.0], r);
    let d = lions_derivative_fd(h, &rho, 0, 0, Slot::Second, 1e-4, Scheme::Central).unwrap();
    assert_abs_diff_eq!(d, 2.0 / 9.0, epsilon = 1e-6);
}

fn probe_samples() -> Vec<ProbeSample> {
    let rho = joint(&[(0.2, 0.5), (-0.7, 1.5), (1.1, -1.0)]);
    [(0.0, 1.0), (1.5, -2.0), (-0.8, 0.3)]
        .iter()
        .map(|&(x, p)| ProbeSample {
            x: vec![x],
            p: vec![p],
            rho: rho.clone(),
        })
        .collect()
}

#[test]
fn concavity_probe_examples() {
    let r = concavity_probe(&reduced(lq(0.0, 1.0, 0.0)), &probe_samples()).unwrap();
    assert_abs_diff_eq!(r.c0_hat.unwrap(), 1.0, epsilon = 1e-4);
    assert_abs_diff_eq!(r.c1_hat.unwrap(), 0.0, epsilon = 1e-4);

    let r = concavity_probe(&reduced(lq(0.5, 1.0, 0.2)), &probe_samples()).unwrap();
    assert_abs_diff_eq!(r.c0_hat.unwrap(), 1.0, epsilon = 1e-4);
    assert_abs_diff_eq!(r.c1_hat.unwrap(), 1.0 / 3.0, epsilon = 1e-4);
    assert_abs_diff_eq!(r.big_c1_hat().unwrap(), 2.0 / 3.0, epsilon = 2e-4);
    assert_eq!(r.verdict, Some(true));

    let empty = concavity_probe(&reduced(lq(0.5, 1.0, 0.2)), &[]).unwrap();
    assert_eq!((empty.c0_hat, empty.c1_hat, empty.verdict), (None, None, None));
}

fn small_joint() -> impl Strategy<Value = JointEnsemble> {
    prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..8).prop_map(|v| joint(&v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn minimizer_beats_random_controls(
        x in -3.0..3.0f64,
        p in -3.0..3.0f64,
        nu in small_joint(),
        probes in prop::collection::vec(-20.0..20.0f64, 100),
    ) {
        let models: [Box<dyn Lagrangian>; 2] = [
            Box::new(LqModel::coupled()),
            Box::new(AnharmonicModel::new(LqModel::coupled(), 0.5)),
        ];
        for m in &models {
            let f = m.law_features(nu.states(), nu.seconds());
            let (h, _) = hamiltonian_min(m.as_ref(), &[x], &[p], &nu).unwrap();
            for &a in &probes {
                prop_assert!(h <= h_value(m.as_ref(), &[x], &[p], &[a], &f) + 1e-9);
            }
        }
    }

    #[test]
    fn fixed_point_keeps_the_first_marginal_and_converges(rho in small_joint(), k in -0.8..0.8f64) {
        let fp = reduced(lq(k, 1.0, 0.2)).fixed_point(&rho, None).unwrap();
        prop_assert_eq!(fp.nu.states(), rho.states());
        prop_assert!(fp.residual <= 1e-12);
        let kappa = k / (1.0 + k);
        let pbar = rho.second_mean()[0];
        for (a, p) in fp.nu.seconds().iter().zip(rho.seconds()) {
            prop_assert!((a + p - kappa * pbar).abs() <= 1e-10);
        }
    }

    #[test]
    fn envelope_identity_on_lq(x in -3.0..3.0f64, p in -3.0..3.0f64, rho in small_joint()) {
        // b = a, so d_p H^ equals the optimal control.
        let rh = reduced(LqModel::coupled());
        let (_, dp) = rh.grad(&[x], &[p], &rho).unwrap();
        let a = rh.freeze(&rho, None).unwrap().control(&[x], &[p]).unwrap();
        prop_assert!((dp[0] - a[0]).abs() <= 1e-6);
    }
}
