use mfgc_core::hamiltonian::terminal_cost;
use mfgc_core::linalg::hungarian;
use mfgc_core::measures::{independent_copy, pushforward, wasserstein, Order, ParticleEnsemble};
use mfgc_core::models::LqModel;
use mfgc_core::monotonicity::{disp_gap_u, ll_gap_u};
use proptest::prelude::*;

fn ens(v: Vec<f64>) -> ParticleEnsemble {
    ParticleEnsemble::from_scalars(v).unwrap()
}

/// Three equal-size ensembles.
fn triple(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| {
        let v = || prop::collection::vec(-5.0..5.0f64, n);
        (v(), v(), v())
    })
}

fn assignment_w2(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let cost: Vec<f64> = (0..n * n).map(|k| (a[k / n] - b[k % n]).powi(2)).collect();
    let perm = hungarian(&cost, n).unwrap();
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    (total / n as f64).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_axioms((a, b, c) in triple(12)) {
        let (a, b, c) = (ens(a), ens(b), ens(c));
        for order in [Order::W1, Order::W2] {
            let ab = wasserstein(order, &a, &b).unwrap();
            let ba = wasserstein(order, &b, &a).unwrap();
            let bc = wasserstein(order, &b, &c).unwrap();
            let ac = wasserstein(order, &a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(wasserstein(order, &a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn sorted_w2_equals_assignment((a, b, _) in triple(8)) {
        let w = wasserstein(Order::W2, &ens(a.clone()), &ens(b.clone())).unwrap();
        prop_assert!((w - assignment_w2(&a, &b)).abs() <= 1e-12);
    }

    #[test]
    fn w1_is_below_w2((a, b, _) in triple(12)) {
        let (a, b) = (ens(a), ens(b));
        let w1 = wasserstein(Order::W1, &a, &b).unwrap();
        prop_assert!(w1 <= wasserstein(Order::W2, &a, &b).unwrap() + 1e-12);
    }

    #[test]
    fn pushforward_keeps_the_first_marginal(v in prop::collection::vec(-5.0..5.0f64, 1..20)) {
        let a = ens(v);
        let rho = pushforward(&a, |x| vec![x[0].sin()]).unwrap();
        prop_assert_eq!(rho.first_marginal(), a);
    }

    #[test]
    fn independent_copy_draws_from_the_support(v in prop::collection::vec(-5.0..5.0f64, 1..20), seed: u64) {
        let a = ens(v);
        let c = independent_copy(&a, seed);
        prop_assert_eq!(c.len(), a.len());
        prop_assert_eq!(&c, &independent_copy(&a, seed));
        for x in c.as_slice() {
            prop_assert!(a.as_slice().contains(x));
        }
    }

    #[test]
    fn ll_gap_is_symmetric((a, b, _) in triple(10)) {
        let lq = LqModel::coupled();
        let u = |x: &[f64], mu: &ParticleEnsemble| terminal_cost(&lq, x, mu);
        let (a, b) = (ens(a), ens(b));
        let ab = ll_gap_u(u, &a, &b).unwrap();
        let ba = ll_gap_u(u, &b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
        prop_assert!(ll_gap_u(u, &a, &a).unwrap().abs() <= 1e-14);
    }

    #[test]
    fn displacement_gap_homogeneity((a, b, _) in triple(10), c in 0.1..3.0f64, lambda in -1.0..1.0f64) {
        let (g, s) = (1.3, -0.4);
        let dxu = |x: &[f64], mu: &ParticleEnsemble| vec![g * x[0] + s * mu.mean()[0]];
        let (a, b) = (ens(a), ens(b));
        let base = disp_gap_u(dxu, lambda, &a, &b).unwrap();
        prop_assert!(disp_gap_u(dxu, lambda, &a, &a).unwrap().abs() <= 1e-14);

        // 1-homogeneous in dxU (with lambda scaled alike).
        let scaled = disp_gap_u(|x, mu| dxu(x, mu).into_iter().map(|v| c * v).collect(), c * lambda, &a, &b).unwrap();
        prop_assert!((scaled - c * base).abs() <= 1e-10 * (1.0 + base.abs()));

        // 2-homogeneous under Delta xi -> c Delta xi for linear dxU.
        let b2 = ens(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - c * (x - y)).collect());
        let stretched = disp_gap_u(dxu, lambda, &a, &b2).unwrap();
        prop_assert!((stretched - c * c * base).abs() <= 1e-10 * (1.0 + base.abs()));
    }
}
