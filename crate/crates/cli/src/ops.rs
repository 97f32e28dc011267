//! Subcommand implementations. Each writes its tables into the output
//! directory and returns the checks it performed.

use anyhow::{bail, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use mfgc_core::measures::{DensityGrid1d, Order, ParticleEnsemble};
use mfgc_core::monotonicity::{check, GapKind};
use mfgc_core::oracle::RiccatiOracle;
use mfgc_core::rng;
use mfgc_core::solver::{
    equilibrium_picard, particle::common_noise_runs, solve_particle_fbsde, FlowSolution, GridSpec, ParticlePaths, Seeds,
    TimeGrid,
};
use mfgc_core::value::{
    lipschitz_estimate, master_residual, propagation_check, semigroup_check, InitialLaw, LipschitzReport,
    OracleField, PropagationKind, ValueQuery, ValueSolver,
};

use crate::artifacts::{Outputs, Verdict};
use crate::config::{Initial, RunConfig};

/// Evenly spaced slice indices `0..=steps`, both ends included.
pub fn slice_indices(steps: usize, slices: usize) -> Vec<usize> {
    if slices < 2 || steps == 0 {
        return vec![0, steps];
    }
    let mut idx: Vec<usize> = (0..slices)
        .map(|k| ((k as f64 * steps as f64 / (slices - 1) as f64).round() as usize).min(steps))
        .collect();
    idx.dedup();
    idx
}

#[derive(Serialize)]
struct URow {
    t: f64,
    x: f64,
    u: f64,
    du: f64,
}

#[derive(Serialize)]
struct MuRow {
    t: f64,
    x: f64,
    density: f64,
}

#[derive(Serialize)]
struct RhoRow {
    t: f64,
    index: usize,
    x: f64,
    p: f64,
    a: f64,
}

#[derive(Serialize)]
struct ResidualRow {
    iteration: usize,
    residual: f64,
}

#[derive(Serialize)]
struct MomentRow {
    t: f64,
    mean: f64,
    variance: f64,
}

#[derive(Serialize)]
struct SolveSummary {
    method: &'static str,
    model: String,
    grid: Option<GridSpec>,
    particles: Option<usize>,
    common_paths: Option<usize>,
    iterations: usize,
    converged: bool,
    final_residual: Option<f64>,
    max_mass_drift: Option<f64>,
    cfl: Option<f64>,
}

pub fn solve(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Verdict>> {
    let rh = cfg.hamiltonian()?;
    match cfg.solve.method {
        mfgc_core::value::Method::Grid => {
            let init = cfg.initial()?;
            if matches!(init, Initial::Particles(_)) {
                bail!("the grid method needs mu0 as gaussian:mean,std or density:<csv>");
            }
            let mu0 = cfg.density(&init)?;
            let g = &cfg.grid;
            let grid = GridSpec::new(mu0.x_min(), mu0.x_max(), mu0.len(), g.t0, g.t_end, g.nt)?;
            let sol = equilibrium_picard(&rh, &mu0, &grid, &cfg.solver, None)?;
            write_flow(out, &sol, cfg.solve.output_slices)?;
            out.write_json(
                "solve.json",
                &SolveSummary {
                    method: "grid",
                    model: cfg.model.name.clone(),
                    grid: Some(grid),
                    particles: None,
                    common_paths: None,
                    iterations: sol.iterations,
                    converged: sol.converged,
                    final_residual: sol.residuals.last().copied(),
                    max_mass_drift: Some(sol.max_mass_drift),
                    cfl: Some(sol.cfl),
                },
            )?;
            Ok(vec![Verdict::new(
                "picard-converged",
                sol.converged,
                sol.residuals.last().copied(),
                Some(cfg.solver.tol_out),
                format!("{} iterations", sol.iterations),
            )])
        }
        mfgc_core::value::Method::Particle => {
            let xi0 = cfg.particles(cfg.solve.particles, cfg.seed)?;
            let g = &cfg.grid;
            let tg = TimeGrid::new(g.t0, g.t_end, g.nt)?;
            let runs = if rh.model().meta().beta != 0.0 {
                common_noise_runs(&rh, &xi0, &tg, Seeds::from_run(cfg.seed), cfg.solve.common_paths.max(1), &cfg.solve.particle)?
            } else {
                vec![solve_particle_fbsde(&rh, &xi0, &tg, Seeds::from_run(cfg.seed), &cfg.solve.particle)?]
            };
            write_particles(out, &runs, cfg.solve.output_slices)?;
            let converged = runs.iter().all(|r| r.converged);
            let iterations = runs.iter().map(|r| r.iterations).max().unwrap_or(0);
            let last = runs.iter().filter_map(|r| r.residuals.last().copied()).fold(0.0, f64::max);
            out.write_json(
                "solve.json",
                &SolveSummary {
                    method: "particle",
                    model: cfg.model.name.clone(),
                    grid: None,
                    particles: Some(xi0.len()),
                    common_paths: Some(runs.len()),
                    iterations,
                    converged,
                    final_residual: Some(last),
                    max_mass_drift: None,
                    cfl: None,
                },
            )?;
            Ok(vec![Verdict::new(
                "picard-converged",
                converged,
                Some(last),
                Some(cfg.solve.particle.tol_out),
                format!("{iterations} iterations over {} common path(s)", runs.len()),
            )])
        }
    }
}

fn write_flow(out: &mut Outputs, sol: &FlowSolution, slices: usize) -> Result<()> {
    let g = sol.grid;
    let idx = slice_indices(g.steps(), slices);
    let (mut u, mut mu, mut rho, mut mom) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &n in &idx {
        let t = g.t(n);
        for i in 0..g.nx {
            u.push(URow {
                t,
                x: g.x(i),
                u: sol.u[n][i],
                du: sol.du[n][i],
            });
            mu.push(MuRow {
                t,
                x: g.x(i),
                density: sol.mu[n].values()[i],
            });
        }
        let r = &sol.rho[n];
        for k in 0..r.len() {
            rho.push(RhoRow {
                t,
                index: k,
                x: r.states()[k],
                p: r.seconds()[k],
                a: sol.controls[n][k],
            });
        }
    }
    for n in 0..=g.steps() {
        mom.push(MomentRow {
            t: g.t(n),
            mean: sol.mu[n].mean(),
            variance: sol.mu[n].variance(),
        });
    }
    let res: Vec<ResidualRow> = sol
        .residuals
        .iter()
        .enumerate()
        .map(|(k, &r)| ResidualRow { iteration: k + 1, residual: r })
        .collect();
    out.write_csv("u.csv", &u)?;
    out.write_csv("mu.csv", &mu)?;
    out.write_csv("rho.csv", &rho)?;
    out.write_csv("moments.csv", &mom)?;
    out.write_csv("residuals.csv", &res)
}

#[derive(Serialize)]
struct PathMomentRow {
    path: usize,
    t: f64,
    mean: f64,
    variance: f64,
}

#[derive(Serialize)]
struct CoefficientRow {
    path: usize,
    t: f64,
    degree: usize,
    coefficient: f64,
}

#[derive(Serialize)]
struct PathResidualRow {
    path: usize,
    iteration: usize,
    residual: f64,
}

fn write_particles(out: &mut Outputs, runs: &[ParticlePaths], slices: usize) -> Result<()> {
    let (mut mom, mut coef, mut res) = (Vec::new(), Vec::new(), Vec::new());
    for (p, run) in runs.iter().enumerate() {
        let steps = run.grid.steps();
        for n in 0..=steps {
            mom.push(PathMomentRow {
                path: p,
                t: run.grid.t(n),
                mean: run.mean(n),
                variance: run.variance(n),
            });
        }
        for n in slice_indices(steps, slices) {
            for (d, &c) in run.coefficients[n].iter().enumerate() {
                coef.push(CoefficientRow {
                    path: p,
                    t: run.grid.t(n),
                    degree: d,
                    coefficient: c,
                });
            }
        }
        for (k, &r) in run.residuals.iter().enumerate() {
            res.push(PathResidualRow {
                path: p,
                iteration: k + 1,
                residual: r,
            });
        }
    }
    out.write_csv("moments.csv", &mom)?;
    out.write_csv("coefficients.csv", &coef)?;
    out.write_csv("residuals.csv", &res)
}

pub fn check_monotonicity(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Verdict>> {
    let rh = cfg.hamiltonian()?;
    let kinds: Vec<GapKind> = if cfg.monotonicity.kinds.is_empty() {
        GapKind::ALL.to_vec()
    } else {
        cfg.monotonicity.kinds.iter().map(|k| GapKind::parse(k)).collect::<Result<_, _>>()?
    };
    let sampler = cfg.sampler();
    let mut reports = Vec::new();
    for kind in kinds {
        reports.push(check(&rh, kind, &sampler, cfg.monotonicity.trials, cfg.monotonicity.tolerance)?);
    }
    out.write_json("monotonicity.json", &reports)?;
    #[derive(Serialize)]
    struct Row<'a> {
        kind: &'a str,
        trials: usize,
        min_gap: f64,
        argmin_trial: usize,
        argmin_seed: u64,
        tolerance: f64,
        pass: bool,
    }
    let rows: Vec<Row> = reports
        .iter()
        .map(|r| Row {
            kind: r.kind.as_str(),
            trials: r.trials,
            min_gap: r.min_gap,
            argmin_trial: r.argmin_trial,
            argmin_seed: r.argmin_seed,
            tolerance: r.tolerance,
            pass: r.pass,
        })
        .collect();
    out.write_csv("monotonicity.csv", &rows)?;
    Ok(reports
        .iter()
        .map(|r| Verdict::nonnegative(r.kind.as_str(), r.min_gap, r.tolerance))
        .collect())
}

pub fn value(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Verdict>> {
    let solver = ValueSolver::new(cfg.hamiltonian()?, cfg.value_config())?;
    let q = ValueQuery {
        t0: cfg.value.t0,
        x: cfg.value.x,
        mu0: cfg.initial_law()?,
        method: cfg.value.method,
    };
    let p = solver.evaluate(&q)?;
    out.write_json("value.json", &p)?;
    out.write_csv("value.csv", &[p])?;
    let mut verdicts = vec![Verdict::new("solver-converged", p.converged, None, None, format!("{} iterations", p.iterations))];
    if let (Some(lq), InitialLaw::Density(d)) = (cfg.model.lq(), &q.mu0) {
        if q.t0 < cfg.grid.t_end && matches!(q.method, mfgc_core::value::Method::Grid) {
            let o = RiccatiOracle::new(lq, q.t0, cfg.grid.t_end)?;
            let m = d.mean();
            let err = (p.value - o.value(q.t0, q.x, m)).abs();
            let gerr = (p.gradient - o.dx_value(q.t0, q.x, m)).abs();
            verdicts.push(Verdict::at_most("value-vs-riccati", err, 5e-3));
            verdicts.push(Verdict::at_most("gradient-vs-riccati", gerr, 5e-3));
        }
    }
    Ok(verdicts)
}

/// Default residual evaluation points: `mean + {-1, -1/2, 0, 1/2, 1} std`.
fn residual_points(mu: &ParticleEnsemble) -> Vec<f64> {
    let (m, s) = (mu.mean()[0], mu.variance()[0].sqrt());
    [-1.0, -0.5, 0.0, 0.5, 1.0].iter().map(|k| m + k * s).collect()
}

/// Smallest outer tolerance allowed under the residual stencil: the measure
/// difference quotients amplify flow error by roughly `N / h^2`.
const RESIDUAL_TOL_OUT: f64 = 1e-12;

pub fn residual(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Verdict>> {
    let rh = cfg.hamiltonian()?;
    let mut vc = cfg.value_config();
    vc.solver.tol_out = vc.solver.tol_out.min(RESIDUAL_TOL_OUT);
    vc.solver.max_outer = vc.solver.max_outer.max(200);
    let tol_out = vc.solver.tol_out;
    let solver = ValueSolver::new(rh.clone(), vc)?;
    let rs = &cfg.residual;
    let mu = cfg.particles(rs.particles, cfg.seed)?;
    let xs = rs.xs.clone().unwrap_or_else(|| residual_points(&mu));
    let field = solver.field(&mu)?;
    let r = master_residual(&field, &rh, rs.t0, &xs, &mu, &rs.fd)?;
    let mut verdicts = vec![Verdict::at_most("master-residual", r.max_abs, rs.tolerance)];
    let mut reports = vec![("solver", r)];
    if let Some(lq) = cfg.model.lq() {
        let oracle = OracleField {
            oracle: RiccatiOracle::new(lq, 0.0, cfg.grid.t_end)?,
        };
        let ro = master_residual(&oracle, &rh, rs.t0, &xs, &mu, &rs.fd)?;
        verdicts.push(Verdict::at_most("master-residual-oracle", ro.max_abs, rs.oracle_tolerance));
        reports.push(("oracle", ro));
    }
    #[derive(Serialize)]
    struct Row<'a> {
        field: &'a str,
        x: f64,
        dt_v: f64,
        dx_v: f64,
        dxx_v: f64,
        hamiltonian: f64,
        measure_term: f64,
        residual: f64,
    }
    let mut rows = Vec::new();
    for (name, r) in &reports {
        for p in &r.points {
            rows.push(Row {
                field: name,
                x: p.x,
                dt_v: p.dt_v,
                dx_v: p.dx_v,
                dxx_v: p.dxx_v,
                hamiltonian: p.hamiltonian,
                measure_term: p.measure_term,
                residual: p.residual,
            });
        }
    }
    let mut json: serde_json::Map<String, serde_json::Value> = reports
        .iter()
        .map(|(n, r)| Ok((n.to_string(), serde_json::to_value(r)?)))
        .collect::<Result<_>>()?;
    json.insert("solver_tol_out".into(), tol_out.into());
    out.write_json("residual.json", &json)?;
    out.write_csv("residual.csv", &rows)?;
    Ok(verdicts)
}

/// Random Gaussian initial laws on `[lo, hi]`: means `U(-1, 1)`, standard
/// deviations `U(1/2, 3/2)`.
pub fn gaussian_pairs(count: usize, seed: u64, lo: f64, hi: f64, nx: usize) -> Result<Vec<(DensityGrid1d, DensityGrid1d)>> {
    let mut g = rng::stream(seed, 0);
    let mut draw = || DensityGrid1d::gaussian(lo, hi, nx, g.gen_range(-1.0..1.0), g.gen_range(0.5..1.5));
    (0..count).map(|_| Ok((draw()?, draw()?))).collect()
}

pub fn propagate(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Verdict>> {
    let kind = PropagationKind::parse(&cfg.propagate.kind)?;
    let solver = ValueSolver::new(cfg.hamiltonian()?, cfg.value_config())?;
    let lo = cfg.grid.x_min.unwrap_or(-14.0);
    let hi = cfg.grid.x_max.unwrap_or(14.0);
    let pairs = gaussian_pairs(cfg.propagate.pairs, cfg.seed, lo, hi, cfg.grid.nx)?;
    let mut pc = cfg.propagate.check.clone();
    pc.sampler.seed = cfg.seed;
    let r = propagation_check(&solver, kind, &pairs, cfg.propagate.t0, &pc)?;
    out.write_json("propagation.json", &r)?;
    #[derive(Serialize)]
    struct Row {
        checkpoint: usize,
        t: f64,
        min_gap: f64,
    }
    let rows: Vec<Row> = r
        .checkpoints
        .iter()
        .zip(&r.gaps)
        .enumerate()
        .map(|(k, (&t, &g))| Row { checkpoint: k, t, min_gap: g })
        .collect();
    out.write_csv("propagation.csv", &rows)?;
    Ok(vec![Verdict::nonnegative(
        format!("propagation-{}", kind.as_str()),
        r.min_gap,
        r.tolerance,
    )])
}

/// Standard normal ensemble shifted to `mean`.
pub fn normal_ensemble(n: usize, seed: u64, mean: f64) -> Result<ParticleEnsemble> {
    let mut g = rng::stream(seed, 0);
    let xs = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut g);
            mean + z
        })
        .collect();
    Ok(ParticleEnsemble::from_scalars(xs)?)
}

/// Half translated pairs (shifts `0.1 .. 1.1`), half independent draws with
/// different means.
pub fn lipschitz_pairs(count: usize, particles: usize, seed: u64) -> Result<Vec<(ParticleEnsemble, ParticleEnsemble)>> {
    let translated = count.div_ceil(2);
    let mut pairs = Vec::with_capacity(count);
    for k in 0..translated {
        let base = normal_ensemble(particles, seed.wrapping_add(k as u64), 0.0)?;
        let shift = 0.1 + (k as f64) / (translated.max(2) - 1) as f64;
        let moved = base.map_coords(|x| x + shift)?;
        pairs.push((base, moved));
    }
    for k in translated..count {
        let s = seed.wrapping_add(1000 + 2 * k as u64);
        pairs.push((normal_ensemble(particles, s, 0.0)?, normal_ensemble(particles, s + 1, 0.5)?));
    }
    Ok(pairs)
}

pub fn lipschitz_rows(out: &mut Outputs, name: &str, r: &LipschitzReport) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        pair: usize,
        distance: f64,
        sup_gradient_gap: f64,
        ratio: f64,
    }
    let rows: Vec<Row> = r
        .ratios
        .iter()
        .map(|p| Row {
            pair: p.pair,
            distance: p.distance,
            sup_gradient_gap: p.sup_gradient_gap,
            ratio: p.ratio,
        })
        .collect();
    out.write_csv(name, &rows)
}

pub fn lipschitz(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Verdict>> {
    let ls = &cfg.lipschitz;
    let order = Order::from_int(ls.order)?;
    let solver = ValueSolver::new(cfg.hamiltonian()?, cfg.value_config())?;
    let pairs = lipschitz_pairs(ls.pairs, ls.particles, cfg.seed)?;
    let r = lipschitz_estimate(&solver, order, &pairs, ls.t0)?;
    out.write_json("lipschitz.json", &r)?;
    lipschitz_rows(out, "lipschitz.csv", &r)?;
    let Some(max) = r.max_ratio else {
        bail!("every pair was skipped");
    };
    match cfg.model.lq() {
        Some(lq) => {
            let b = RiccatiOracle::new(lq, 0.0, cfg.grid.t_end)?.b(ls.t0).abs();
            Ok(vec![Verdict::new(
                "max-ratio-vs-riccati",
                (max - b).abs() <= ls.tolerance,
                Some((max - b).abs()),
                Some(ls.tolerance),
                format!("max ratio {max}, |B(t0)| = {b}"),
            )])
        }
        None => Ok(vec![Verdict::new("max-ratio-finite", max.is_finite(), Some(max), None, "")]),
    }
}

pub fn semigroup(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Verdict>> {
    let solver = ValueSolver::new(cfg.hamiltonian()?, cfg.value_config())?;
    let init = cfg.initial()?;
    let mu0 = cfg.density(&init)?;
    let (t0, t_end) = (cfg.grid.t0, cfg.grid.t_end);
    let t1 = cfg.semigroup.t1.unwrap_or(0.5 * (t0 + t_end));
    let s = semigroup_check(&solver, &mu0, t0, t1, None)?;
    out.write_json("semigroup.json", &s.report)?;
    #[derive(Serialize)]
    struct Row {
        x: f64,
        direct: f64,
        two_stage: f64,
    }
    let rows: Vec<Row> = s
        .report
        .points
        .iter()
        .enumerate()
        .map(|(i, &x)| Row {
            x,
            direct: s.report.direct[i],
            two_stage: s.report.two_stage[i],
        })
        .collect();
    out.write_csv("semigroup.csv", &rows)?;
    Ok(vec![Verdict::at_most("semigroup-discrepancy", s.report.discrepancy, cfg.semigroup.tolerance)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_cover_both_ends() {
        assert_eq!(slice_indices(10, 3), vec![0, 5, 10]);
        assert_eq!(slice_indices(2, 101), vec![0, 1, 2]);
        assert_eq!(slice_indices(7, 1), vec![0, 7]);
    }

    #[test]
    fn lipschitz_pairs_mix_translations_and_draws() {
        let p = lipschitz_pairs(5, 8, 3).unwrap();
        assert_eq!(p.len(), 5);
        let d: Vec<f64> = p[0].0.as_slice().iter().zip(p[0].1.as_slice()).map(|(a, b)| b - a).collect();
        assert!(d.iter().all(|v| (v - 0.1).abs() < 1e-12));
        let last = &p[4];
        assert!((last.1.as_slice()[0] - last.0.as_slice()[0] - 0.5).abs() > 1e-9);
    }
}
