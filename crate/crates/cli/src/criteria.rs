//! The acceptance criteria. Each runs at a `fast` (coarse) or `full`
//! (reference) level, writes its tables and returns its checks. Tolerances
//! are multiplied by the criterion's scale factor.

use std::sync::Arc;

use anyhow::{bail, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use mfgc_core::hamiltonian::{concavity_probe, ProbeSample, ReducedHamiltonian};
use mfgc_core::linalg::hungarian;
use mfgc_core::measures::{paired_distance, wasserstein, DensityGrid1d, JointEnsemble, Order, ParticleEnsemble};
use mfgc_core::models::{AnharmonicModel, LqModel};
use mfgc_core::monotonicity::{disp_diff_form_h, disp_scaled_gap};
use mfgc_core::oracle::RiccatiOracle;
use mfgc_core::rng;
use mfgc_core::solver::{
    best_response_gap, equilibrium_picard, quadratic_fit, FlowSolution, GridSpec, McConfig, SolverConfig,
};
use mfgc_core::value::{
    lipschitz_estimate, master_residual, propagation_check, semigroup_check, xmu_derivative_fd, FdConfig,
    OracleField, PropagationConfig, PropagationKind, ValueConfig, ValueSolver,
};

use crate::artifacts::{Outputs, Verdict};
use crate::ops::{gaussian_pairs, lipschitz_pairs, lipschitz_rows, normal_ensemble};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Fast,
    Full,
}

impl Level {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            _ => bail!("unknown suite {s:?}; expected fast or full"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Fast => "fast",
            Level::Full => "full",
        }
    }

    fn pick<T>(self, fast: T, full: T) -> T {
        match self {
            Level::Fast => fast,
            Level::Full => full,
        }
    }
}

/// Inputs shared by every criterion.
#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    pub level: Level,
    /// Tolerance multiplier.
    pub scale: f64,
    pub seed: u64,
}

/// What a criterion reports.
#[derive(Debug, Clone)]
pub struct Measured {
    pub checks: Vec<Verdict>,
    pub summary: String,
}

pub type RunFn = fn(&Ctx, &mut Outputs) -> Result<Measured>;

pub struct Criterion {
    pub id: u32,
    pub name: &'static str,
    /// Runtime budget at the full level, seconds.
    pub budget: f64,
    pub run: RunFn,
}

/// Criteria 1 to 11; criterion 12 (determinism) is run by the suite.
pub const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "transport oracle", budget: 5.0, run: transport },
    Criterion { id: 2, name: "control fixed point", budget: 1.0, run: fixed_point },
    Criterion { id: 3, name: "concavity constants", budget: 5.0, run: concavity },
    Criterion { id: 4, name: "monotonicity form equivalence", budget: 30.0, run: form_equivalence },
    Criterion { id: 5, name: "solver vs Riccati oracle", budget: 120.0, run: solver_oracle },
    Criterion { id: 6, name: "best-response optimality", budget: 120.0, run: best_response },
    Criterion { id: 7, name: "monotonicity propagation", budget: 300.0, run: propagation },
    Criterion { id: 8, name: "Lipschitz estimates", budget: 300.0, run: lipschitz },
    Criterion { id: 9, name: "xmu derivative bound", budget: 120.0, run: xmu_bound },
    Criterion { id: 10, name: "master-equation residual", budget: 300.0, run: residual },
    Criterion { id: 11, name: "semigroup continuation", budget: 120.0, run: semigroup },
];

pub const DETERMINISM_ID: u32 = 12;
pub const DETERMINISM_NAME: &str = "determinism";

fn normals(g: &mut rng::LabRng, n: usize, mean: f64, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(g);
            mean + std * z
        })
        .collect()
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::INFINITY, f64::min)
}

fn lq(model: LqModel) -> ReducedHamiltonian {
    ReducedHamiltonian::new(Arc::new(model))
}

fn transport(ctx: &Ctx, out: &mut Outputs) -> Result<Measured> {
    #[derive(Serialize)]
    struct Row {
        instance: usize,
        particles: usize,
        sorted: f64,
        assignment: f64,
        difference: f64,
    }
    let mut rows = Vec::new();
    for k in 0..200 {
        let mut g = rng::stream(ctx.seed ^ 0x0001, k as u64);
        let n = g.gen_range(1..=8);
        let (ma, sa) = (g.gen_range(-2.0..2.0), g.gen_range(0.1..3.0));
        let (mb, sb) = (g.gen_range(-2.0..2.0), g.gen_range(0.1..3.0));
        let a = normals(&mut g, n, ma, sa);
        let b = normals(&mut g, n, mb, sb);
        let sorted = wasserstein(
            Order::W2,
            &ParticleEnsemble::from_scalars(a.clone())?,
            &ParticleEnsemble::from_scalars(b.clone())?,
        )?;
        let cost: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| (x - y) * (x - y))).collect();
        let assignment = hungarian(&cost, n)?;
        let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        let lp = (total / n as f64).sqrt();
        rows.push(Row {
            instance: k,
            particles: n,
            sorted,
            assignment: lp,
            difference: (sorted - lp).abs(),
        });
    }
    out.write_csv("c01_transport.csv", &rows)?;
    let worst = max_of(rows.iter().map(|r| r.difference));
    Ok(Measured {
        checks: vec![Verdict::at_most("max |W2 sorted - W2 assignment|", worst, 1e-12 * ctx.scale)],
        summary: format!("200 instances, max difference {worst:.3e}"),
    })
}

fn fixed_point(ctx: &Ctx, out: &mut Outputs) -> Result<Measured> {
    let model = LqModel::coupled();
    let kappa = model.kappa();
    let rh = lq(model);
    #[derive(Serialize)]
    struct Row {
        trial: usize,
        particles: usize,
        iterations: usize,
        residual: f64,
        closed_form_distance: f64,
        first_marginal_identical: bool,
    }
    let mut rows = Vec::new();
    for k in 0..20 {
        let mut g = rng::stream(ctx.seed ^ 0x0002, k as u64);
        let n = g.gen_range(2..=32);
        let states = normals(&mut g, n, 0.0, 1.0);
        let (pm, ps) = (g.gen_range(-1.0..1.0), g.gen_range(0.5..2.0));
        let seconds = normals(&mut g, n, pm, ps);
        let rho = JointEnsemble::new(1, states.clone(), seconds.clone())?;
        let fp = rh.fixed_point(&rho, None)?;
        let pbar = seconds.iter().sum::<f64>() / n as f64;
        let exact: Vec<f64> = seconds.iter().map(|p| -(p - kappa * pbar)).collect();
        rows.push(Row {
            trial: k,
            particles: n,
            iterations: fp.iterations,
            residual: fp.residual,
            closed_form_distance: paired_distance(fp.nu.seconds(), &exact),
            first_marginal_identical: fp
                .nu
                .states()
                .iter()
                .zip(&states)
                .all(|(a, b)| a.to_bits() == b.to_bits()),
        });
    }
    out.write_csv("c02_fixed_point.csv", &rows)?;
    let dist = max_of(rows.iter().map(|r| r.closed_form_distance));
    let res = max_of(rows.iter().map(|r| r.residual));
    let iters = rows.iter().map(|r| r.iterations).max().unwrap_or(0);
    let bitwise = rows.iter().all(|r| r.first_marginal_identical);
    let tol = 1e-12 * ctx.scale;
    Ok(Measured {
        checks: vec![
            Verdict::at_most("distance to closed form", dist, tol),
            Verdict::at_most("fixed-point residual", res, tol),
            Verdict::at_most("iterations", iters as f64, 50.0),
            Verdict::new("first marginal bitwise", bitwise, None, None, ""),
        ],
        summary: format!("20 ensembles, {iters} iterations max, distance {dist:.3e}"),
    })
}

fn concavity(ctx: &Ctx, out: &mut Outputs) -> Result<Measured> {
    let rh = lq(LqModel::coupled());
    let mut samples = Vec::new();
    for k in 0..20 {
        let mut g = rng::stream(ctx.seed ^ 0x0003, k as u64);
        let n = 8;
        let rho = JointEnsemble::new(1, normals(&mut g, n, 0.0, 1.0), normals(&mut g, n, 0.0, 1.0))?;
        samples.push(ProbeSample {
            x: vec![g.gen_range(-2.0..2.0)],
            p: vec![g.gen_range(-2.0..2.0)],
            rho,
        });
    }
    let r = concavity_probe(&rh, &samples)?;
    out.write_json("c03_concavity.json", &r)?;
    let (Some(c0), Some(c1), Some(big)) = (r.c0_hat, r.c1_hat, r.big_c1_hat()) else {
        bail!("concavity probe returned no estimate");
    };
    let tol = 1e-4 * ctx.scale;
    Ok(Measured {
        checks: vec![
            Verdict::at_most("|c0 - 1|", (c0 - 1.0).abs(), tol),
            Verdict::at_most("|c1 - 1/3|", (c1 - 1.0 / 3.0).abs(), tol),
            Verdict::at_most("|C1 - 2/3|", (big - 2.0 / 3.0).abs(), 2.0 * tol),
        ],
        summary: format!("c0 {c0:.8}, c1 {c1:.8}, C1 {big:.8}"),
    })
}

/// Errors at or below this relative level are treated as converged: the
/// observed order is undefined once the sweep reaches the floor.
const FORM_NOISE_FLOOR: f64 = 1e-5;
const FORM_EPS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];
/// Observed orders are compared at one-decimal precision.
const ORDER_SLACK: f64 = 0.05;

#[derive(Serialize)]
struct FormRow {
    model: &'static str,
    sample: usize,
    form: f64,
    rel_err_1e1: f64,
    rel_err_1e2: f64,
    rel_err_1e3: f64,
    rel_err_1e4: f64,
    /// Least-squares slope of `log err` against `log eps` over the sweep
    /// points above the noise floor; absent when fewer than two remain.
    order: Option<f64>,
}

fn loglog_slope(eps: &[f64], err: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .zip(err)
        .filter(|(_, &e)| e > FORM_NOISE_FLOOR)
        .map(|(&x, &e)| (x.log10(), e.log10()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

fn form_samples(rh: &ReducedHamiltonian, lambda: f64, model: &'static str, seed: u64) -> Result<Vec<FormRow>> {
    (0..20)
        .map(|k| {
            let mut g = rng::stream(seed, k as u64);
            let n = 8;
            let rho = JointEnsemble::new(1, normals(&mut g, n, 0.0, 1.0), normals(&mut g, n, 0.0, 1.0))?;
            let gamma = normals(&mut g, n, 0.0, 1.0);
            let zeta = normals(&mut g, n, 0.0, 1.0);
            let form = -disp_diff_form_h(rh, &rho, &gamma, &zeta, lambda)?;
            let errs: Vec<f64> = FORM_EPS
                .iter()
                .map(|&e| Ok((disp_scaled_gap(rh, &rho, &gamma, &zeta, lambda, e)? - form).abs() / form.abs()))
                .collect::<Result<_>>()?;
            Ok(FormRow {
                model,
                sample: k,
                form,
                rel_err_1e1: errs[0],
                rel_err_1e2: errs[1],
                rel_err_1e3: errs[2],
                rel_err_1e4: errs[3],
                order: loglog_slope(&FORM_EPS, &errs),
            })
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

/// The LQ gap is exactly quadratic in `eps`, so its sweep sits at the
/// finite-difference floor and has no observable order; the order is
/// demonstrated on the anharmonic model, where the `O(eps)` term is real.
fn form_equivalence(ctx: &Ctx, out: &mut Outputs) -> Result<Measured> {
    let disp = LqModel::displacement_fixture();
    let mut rows = form_samples(&lq(disp), disp.lambda, "lq1d-disp", ctx.seed ^ 0x0004)?;
    let base = LqModel::uncoupled();
    let anh = ReducedHamiltonian::new(Arc::new(AnharmonicModel::new(base, 1.0)));
    rows.extend(form_samples(&anh, base.lambda, "anharmonic1d", ctx.seed ^ 0x0104)?);
    out.write_csv("c04_form_equivalence.csv", &rows)?;
    let final_err = max_of(rows.iter().map(|r| r.rel_err_1e4));
    let orders = |m: &str| -> Vec<f64> { rows.iter().filter(|r| r.model == m).filter_map(|r| r.order).collect() };
    let lq_orders = orders("lq1d-disp");
    let lq_ok = lq_orders.iter().all(|&o| o >= 1.0 - ORDER_SLACK);
    let anh_orders = orders("anharmonic1d");
    let anh_median = median(anh_orders.clone());
    let anh_ok = anh_orders.len() == 20 && anh_median.is_some_and(|o| o >= 1.0 - ORDER_SLACK);
    let tol = 1e-3 * ctx.scale;
    Ok(Measured {
        checks: vec![
            Verdict::at_most("max relative error at eps = 1e-4", final_err, tol),
            Verdict::new(
                "LQ: order >= 1 or sweep at the noise floor",
                lq_ok,
                median(lq_orders.clone()),
                Some(1.0),
                format!("{} of 20 samples at the {FORM_NOISE_FLOOR:e} floor", 20 - lq_orders.len()),
            ),
            Verdict::new(
                "anharmonic: median observed order >= 1",
                anh_ok,
                anh_median,
                Some(1.0),
                format!("per-sample orders {:.3} to {:.3}", min_of(anh_orders.iter().copied()), max_of(anh_orders.iter().copied())),
            ),
        ],
        summary: format!(
            "final relative error {final_err:.3e}; LQ sweep at floor in {} of 20; anharmonic median order {:.3}",
            20 - lq_orders.len(),
            anh_median.unwrap_or(f64::NAN)
        ),
    })
}

const M0: f64 = 0.5;
const S0: f64 = 1.0;

fn oracle_solver() -> SolverConfig {
    SolverConfig {
        damping: 1.0,
        max_outer: 200,
        tol_out: 1e-10,
        projection: 64,
    }
}

fn coupled_flow(nx: usize, nt: usize, t0: f64) -> Result<(FlowSolution, GridSpec)> {
    let rh = lq(LqModel::coupled());
    let grid = GridSpec::around(M0, S0, 0.0, nx, t0, 1.0, nt)?;
    let mu0 = DensityGrid1d::gaussian(grid.x_min, grid.x_max, nx, M0, S0)?;
    Ok((equilibrium_picard(&rh, &mu0, &grid, &oracle_solver(), None)?, grid))
}

#[derive(Serialize)]
struct ErrorRow {
    nx: usize,
    nt: usize,
    iterations: usize,
    converged: bool,
    u: f64,
    du: f64,
    mean: f64,
    variance: f64,
}

fn solver_oracle(ctx: &Ctx, out: &mut Outputs) -> Result<Measured> {
    // The coarse ladder is too coarse for the 1e-3 moment tolerance, so both levels share it.
    let levels: &[(usize, usize)] = &[(100, 125), (200, 500), (400, 2000)];
    let o = RiccatiOracle::new(LqModel::coupled(), 0.0, 1.0)?;
    let mf = o.moments(M0, S0 * S0);
    let mut rows = Vec::new();
    for &(nx, nt) in levels {
        let (sol, grid) = coupled_flow(nx, nt, 0.0)?;
        let interior = grid.nodes_within(M0 - 4.0 * S0, M0 + 4.0 * S0);
        let (mut eu, mut edu, mut em, mut ev) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for n in 0..=grid.steps() {
            let t = grid.t(n);
            let m = mf.mean(t);
            for i in interior.clone() {
                let x = grid.x(i);
                eu = eu.max((sol.u[n][i] - o.value(t, x, m)).abs());
                edu = edu.max((sol.du[n][i] - o.dx_value(t, x, m)).abs());
            }
            em = em.max((sol.mu[n].mean() - m).abs());
            ev = ev.max((sol.mu[n].variance() - mf.variance(t)).abs());
        }
        rows.push(ErrorRow {
            nx,
            nt,
            iterations: sol.iterations,
            converged: sol.converged,
            u: eu,
            du: edu,
            mean: em,
            variance: ev,
        });
    }
    out.write_csv("c05_refinement.csv", &rows)?;
    let k = rows.len();
    let (fine, prev) = (&rows[k - 1], &rows[k - 2]);
    let order = (prev.u / fine.u).log2();
    let s = ctx.scale;
    Ok(Measured {
        checks: vec![
            Verdict::new("converged", rows.iter().all(|r| r.converged), None, None, ""),
            Verdict::at_most("interior max error of u", fine.u, 5e-3 * s),
            Verdict::at_most("interior max error of d_x u", fine.du, 5e-3 * s),
            Verdict::at_most("max error of the mean", fine.mean, 1e-3 * s),
            Verdict::at_most("max error of the variance", fine.variance, 1e-3 * s),
            Verdict::new("observed order of u >= 1", order >= 1.0, Some(order), Some(1.0), ""),
        ],
        summary: format!(
            "{}x{}: u {:.2e}, du {:.2e}, mean {:.2e}, var {:.2e}, order {order:.2}",
            fine.nx, fine.nt, fine.u, fine.du, fine.mean, fine.variance
        ),
    })
}

type Field = fn(f64, f64) -> f64;

const PERTURBATIONS: [(&str, Field); 5] = [
    ("constant", |_, _| 1.0),
    ("sine", |_, x| x.sin()),
    ("affine", |t, x| 0.5 * x + t),
    ("bump", |_, x| (-x * x).exp()),
    ("oscillating", |t, x| (2.0 * t).cos() * x.tanh()),
];
const BR_EPS: [f64; 3] = [0.05, 0.1, 0.2];

fn best_response(ctx: &Ctx, out: &mut Outputs) -> Result<Measured> {
    let rh = lq(LqModel::coupled());
    // Monte-Carlo steps match the flow grid so the equilibrium feedback is
    // the discrete optimum of the simulated dynamics.
    let nt = ctx.level.pick(250, 500);
    let (sol, _) = coupled_flow(200, nt, 0.0)?;
    let mc = McConfig {
        paths: 20_000,
        steps: nt,
        seed: ctx.seed ^ 0x0006,
    };
    #[derive(Serialize)]
    struct Row {
        field: &'static str,
        eps: f64,
        gap: f64,
        std_error: f64,
        z: f64,
    }
    #[derive(Serialize)]
    struct Fit {
        field: &'static str,
        curvature: f64,
        r_squared: f64,
    }
    let (mut rows, mut fits) = (Vec::new(), Vec::new());
    for (name, w) in PERTURBATIONS {
        let mut gaps = Vec::new();
        for e in BR_EPS {
            let g = best_response_gap(&rh, &sol, &|t, x| e * w(t, x), &mc)?;
            rows.push(Row {
                field: name,
                eps: e,
                gap: g.gap,
                std_error: g.std_error,
                z: g.gap / g.std_error,
            });
            gaps.push(g.gap);
        }
        let (c, r2) = quadratic_fit(&BR_EPS, &gaps);
        fits.push(Fit {
            field: name,
            curvature: c,
            r_squared: r2,
        });
    }
    out.write_csv("c06_gaps.csv", &rows)?;
    out.write_csv("c06_fits.csv", &fits)?;
    let min_z = min_of(rows.iter().map(|r| r.z));
    let min_r2 = min_of(fits.iter().map(|f| f.r_squared));
    // Scaling the tolerance widens the admitted band: 3 standard errors and
    // 1 - R^2 <= 0.01 at scale 1.
    let s = ctx.scale;
    Ok(Measured {
        checks: vec![
            Verdict::nonnegative("min gap / standard error", min_z, 3.0 * s),
            Verdict::new(
                "min R^2 of the eps^2 fit",
                1.0 - min_r2 <= 0.01 * s,
                Some(min_r2),
                Some(1.0 - 0.01 * s),
                "",
            ),
        ],
        summary: format!("{} paths, min z {min_z:.2}, min R^2 {min_r2:.5}", mc.paths),
    })
}

fn propagation(ctx: &Ctx, out: &mut Outputs) -> Result<Measured> {
    let (pairs, nx, dt, trials) = ctx.level.pick((3, 80, 5e-3, 50), (20, 120, 2e-3, 200));
    let solver_cfg = SolverConfig {
        damping: 0.6,
        max_outer: 200,
        tol_out: 1e-8,
        projection: 64,
    };
    let inits = gaussian_pairs(pairs, ctx.seed ^ 0x0007, -14.0, 14.0, nx)?;
    let pc = PropagationConfig {
        tolerance: 1e-6 * ctx.scale,
        precheck_trials: trials,
        ..PropagationConfig::default()
    };
    let mut checks = Vec::new();
    let mut parts = Vec::new();
    for (kind, model) in [
        (PropagationKind::LasryLions, LqModel::lasry_lions_fixture()),
        (PropagationKind::Displacement, LqModel::displacement_fixture()),
    ] {
        let cfg = ValueConfig {
            nx,
            dt,
            solver: solver_cfg,
            ..ValueConfig::default()
        };
        let solver = ValueSolver::new(lq(model), cfg)?;
        let r = propagation_check(&solver, kind, &inits, 0.0, &pc)?;
        out.write_json(&format!("c07_propagation_{}.json", kind.as_str()), &r)?;
        checks.push(Verdict::nonnegative(format!("{} min gap", kind.as_str()), r.min_gap, r.tolerance));
        parts.push(format!("{} min {:.3e}", kind.as_str(), r.min_gap));
    }
    Ok(Measured {
        checks,
        summary: format!("{pairs} pairs x 9 checkpoints: {}", parts.join(", ")),
    })
}

fn value_solver(nx: usize, dt: f64) -> Result<ValueSolver> {
    let cfg = ValueConfig {
        nx,
        dt,
        solver: SolverConfig {
            tol_out: 1e-12,
            ..oracle_solver()
        },
        ..ValueConfig::default()
    };
    Ok(ValueSolver::new(lq(LqModel::coupled()), cfg)?)
}

fn lipschitz(ctx: &Ctx, out: &mut Outputs) -> Result<Measured> {
    let t0 = 0.5;
    let (count, dt) = ctx.level.pick((4, 2e-3), (50, 1e-3));
    let solver = value_solver(200, dt)?;
    let b = RiccatiOracle::new(LqModel::coupled(), 0.0, 1.0)?.b(t0).abs();
    let pairs = lipschitz_pairs(count, 32, ctx.seed ^ 0x0008)?;
    let r = lipschitz_estimate(&solver, Order::W2, &pairs, t0)?;
    lipschitz_rows(out, "c08_pairs.csv", &r)?;
    let base = normal_ensemble(32, ctx.seed ^ 0x0108, 0.0)?;
    let sweep_pairs: Vec<_> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&w| Ok((base.clone(), base.map_coords(|x| x + w)?)))
        .collect::<Result<_>>()?;
    let sweep = lipschitz_estimate(&solver, Order::W2, &sweep_pairs, t0)?;
    lipschitz_rows(out, "c08_sweep.csv", &sweep)?;
    let Some(max) = r.max_ratio else {
        bail!("every Lipschitz pair was skipped");
    };
    let ratios: Vec<f64> = sweep.ratios.iter().map(|p| p.ratio).collect();
    if ratios.len() != 3 {
        bail!("distance sweep skipped a pair");
    }
    let spread = max_of(ratios.iter().copied()) / min_of(ratios.iter().copied()) - 1.0;
    let s = ctx.scale;
    Ok(Measured {
        checks: vec![
            Verdict::at_most("|max ratio - |B(t0)||", (max - b).abs(), 1e-3 * s),
            Verdict::at_most("ratio spread across W2 in {1e-1, 1e-2, 1e-3}", spread, 0.05 * s),
        ],
        summary: format!("{count} pairs: max ratio {max:.6} vs |B| {b:.6}; sweep spread {spread:.2e}"),
    })
}

fn xmu_bound(ctx: &Ctx, out: &mut Outputs) -> Result<Measured> {
    let t0 = 0.5;
    let solver = value_solver(80, 1e-3)?;
    let rh = solver.hamiltonian().clone();
    let o = RiccatiOracle::new(LqModel::coupled(), 0.0, 1.0)?;
    let xs = [-1.0, 0.3, 1.0];
    #[derive(Serialize)]
    struct Row {
        particles: usize,
        index: usize,
        x: f64,
        estimate: f64,
    }
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for n in [8, 16, 32] {
        let mu = normal_ensemble(n, ctx.seed ^ 0x0009, 0.3)?;
        let idx: Vec<usize> = ctx.level.pick(vec![0], vec![0, n / 2]);
        let field = solver.field(&mu)?;
        let r = xmu_derivative_fd(&field, &rh, t0, &mu, &idx, &xs, &FdConfig::default())?;
        let mut sum = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            for (l, &x) in xs.iter().enumerate() {
                let e = r.entries[k][l];
                sum += e;
                rows.push(Row {
                    particles: n,
                    index: i,
                    x,
                    estimate: e,
                });
            }
        }
        means.push(sum / (idx.len() * xs.len()) as f64);
    }
    out.write_csv("c09_xmu.csv", &rows)?;
    let lo = min_of(means.iter().copied());
    let hi = max_of(means.iter().copied());
    let spread = (hi - lo) / lo.abs().max(hi.abs());
    let max_entry = max_of(rows.iter().map(|r| r.estimate.abs()));
    let bound = o.sup_abs_b();
    let s = ctx.scale;
    Ok(Measured {
        checks: vec![
            Verdict::at_most("relative spread across N in {8, 16, 32}", spread, 0.05 * s),
            Verdict::at_most("max |entry| / sup|B|", max_entry / bound, 1.0 + 0.1 * s),
        ],
        summary: format!(
            "N-means {:.5}/{:.5}/{:.5} (B(t0) = {:.5}), max entry {max_entry:.5} vs sup|B| {bound:.5}",
            means[0],
            means[1],
            means[2],
            o.b(t0)
        ),
    })
}

fn residual(ctx: &Ctx, out: &mut Outputs) -> Result<Measured> {
    let t0 = 0.5;
    let (n, dt) = ctx.level.pick((8, 2e-3), (32, 1e-3));
    let solver = value_solver(80, dt)?;
    let rh = solver.hamiltonian().clone();
    let mu = normal_ensemble(n, ctx.seed ^ 0x000A, 0.3)?;
    let xs = [-1.0, 0.0, 0.3, 1.0, 1.5];
    let fd = FdConfig::default();
    let r = master_residual(&solver.field(&mu)?, &rh, t0, &xs, &mu, &fd)?;
    let oracle = OracleField {
        oracle: RiccatiOracle::new(LqModel::coupled(), 0.0, 1.0)?,
    };
    let ro = master_residual(&oracle, &rh, t0, &xs, &mu, &fd)?;
    out.write_json("c10_residual_solver.json", &r)?;
    out.write_json("c10_residual_oracle.json", &ro)?;
    let s = ctx.scale;
    Ok(Measured {
        checks: vec![
            Verdict::at_most("solver residual", r.max_abs, 5e-2 * s),
            Verdict::at_most("oracle residual (stencil floor)", ro.max_abs, 1e-4 * s),
        ],
        summary: format!(
            "N = {n}, {} solves: solver {:.3e}, oracle {:.3e}",
            r.solves, r.max_abs, ro.max_abs
        ),
    })
}

fn semigroup(ctx: &Ctx, out: &mut Outputs) -> Result<Measured> {
    let (nx, dt) = ctx.level.pick((200, 2e-3), (400, 5e-4));
    let solver = value_solver(nx, dt)?;
    let grid = GridSpec::around(M0, S0, 0.0, nx, 0.0, 1.0, 2)?;
    let mu0 = DensityGrid1d::gaussian(grid.x_min, grid.x_max, nx, M0, S0)?;
    let (t0, t1) = (0.0, 0.5);
    let s = semigroup_check(&solver, &mu0, t0, t1, None)?;
    let o = RiccatiOracle::new(LqModel::coupled(), 0.0, 1.0)?;
    let m1 = o.moments(M0, S0 * S0).mean(t1);
    let err = |u: &[f64]| max_of(s.report.points.iter().zip(u).map(|(x, v)| (v - o.value(t1, *x, m1)).abs()));
    let (e1, e2) = (err(&s.report.direct), err(&s.report.two_stage));
    out.write_json("c11_semigroup.json", &s.report)?;
    let budget = e1 + e2;
    let d = s.report.discrepancy;
    let sc = ctx.scale;
    Ok(Measured {
        checks: vec![
            Verdict::at_most("discrepancy / summed stage errors", d / budget, sc),
            Verdict::at_most("summed stage errors", budget, 1e-2 * sc),
        ],
        summary: format!("discrepancy {d:.3e}, stage errors {e1:.3e} + {e2:.3e}"),
    })
}
