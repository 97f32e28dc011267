//! Monte-Carlo check that the equilibrium control is a best response to its
//! own flow: `J(alpha* + w) - J(alpha*) >= 0`.
//!
//! Both costs are simulated on the same paths (common random numbers) with
//! antithetic pairs `(U, B)` and `(1 - U, -B)`, where `U` drives inverse-CDF
//! sampling of the initial law and is stratified across pairs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::{minimize_h, ReducedHamiltonian};
use crate::linalg::polyval;
use crate::rng;

use super::grid::FlowSolution;
use super::particle::ParticlePaths;

/// Frozen equilibrium data seen by a deviating player (1-d).
pub trait EquilibriumFlow: Sync {
    fn times(&self) -> Vec<f64>;
    /// Law features of `nu*_{t_n}`.
    fn features(&self, n: usize) -> &[f64];
    fn terminal_features(&self) -> &[f64];
    /// Decoupling field `d_x u(t_n, x)`.
    fn momentum(&self, n: usize, x: f64) -> f64;
    /// Quantile function of the initial law.
    fn initial_quantile(&self, u: f64) -> f64;
    fn beta(&self) -> f64 {
        0.0
    }
}

impl EquilibriumFlow for FlowSolution {
    fn times(&self) -> Vec<f64> {
        self.grid.times()
    }

    fn features(&self, n: usize) -> &[f64] {
        &self.features[n]
    }

    fn terminal_features(&self) -> &[f64] {
        &self.terminal_features
    }

    fn momentum(&self, n: usize, x: f64) -> f64 {
        self.du_at(n, x)
    }

    fn initial_quantile(&self, u: f64) -> f64 {
        self.mu[0].quantile(u)
    }
}

impl EquilibriumFlow for ParticlePaths {
    fn times(&self) -> Vec<f64> {
        ParticlePaths::times(self)
    }

    fn features(&self, n: usize) -> &[f64] {
        &self.features[n]
    }

    fn terminal_features(&self) -> &[f64] {
        &self.terminal_features
    }

    fn momentum(&self, n: usize, x: f64) -> f64 {
        polyval(&self.coefficients[n], x)
    }

    fn initial_quantile(&self, u: f64) -> f64 {
        let mut xs = self.initial.as_slice().to_vec();
        xs.sort_by(f64::total_cmp);
        let k = ((u * xs.len() as f64) as usize).min(xs.len() - 1);
        xs[k]
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}

/// Monte-Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub paths: usize,
    /// Target number of time steps; the flow grid is subsampled evenly.
    pub steps: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            paths: 20_000,
            steps: 100,
            seed: 0,
        }
    }
}

/// Cost difference estimate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct GapEstimate {
    pub gap: f64,
    pub std_error: f64,
    pub paths: usize,
}

/// `E[J(alpha* + w) - J(alpha*)]` over the initial law of `flow`.
pub fn best_response_gap(
    rh: &ReducedHamiltonian,
    flow: &dyn EquilibriumFlow,
    perturbation: &(dyn Fn(f64, f64) -> f64 + Sync),
    mc: &McConfig,
) -> Result<GapEstimate> {
    if rh.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: rh.dim(),
        });
    }
    if flow.beta() != 0.0 {
        return Err(Error::CommonNoiseUnsupported(flow.beta()));
    }
    if mc.paths < 4 {
        return Err(Error::InvalidArgument("at least 4 Monte-Carlo paths are required".into()));
    }
    let times = flow.times();
    let levels = times.len() - 1;
    if levels == 0 {
        return Ok(GapEstimate {
            gap: 0.0,
            std_error: 0.0,
            paths: mc.paths,
        });
    }
    let stride = (levels / mc.steps.max(1)).max(1);
    let idx: Vec<usize> = (0..=levels).step_by(stride).collect();
    let pairs = mc.paths / 2;
    let model = rh.model();

    let run = |x0: f64, z: &[f64], sign: f64| -> Result<f64> {
        let (mut xb, mut xp) = (x0, x0);
        let (mut cb, mut cp) = (0.0, 0.0);
        let (mut ab, mut ap) = (0.0, 0.0);
        let mut drift = [0.0];
        for (k, w) in idx.windows(2).enumerate() {
            let (n, n1) = (w[0], w[1]);
            let (t, dt) = (times[n], times[n1] - times[n]);
            let f = flow.features(n);
            // The discrete-time optimal feedback on [t_n, t_n+1) prices the
            // state with the value at the end of the step.
            minimize_h(model, &[xb], &[flow.momentum(n1, xb)], f, std::slice::from_mut(&mut ab))?;
            minimize_h(model, &[xp], &[flow.momentum(n1, xp)], f, std::slice::from_mut(&mut ap))?;
            let a_pert = ap + perturbation(t, xp);
            cb += model.running_cost(&[xb], &[ab], f) * dt;
            cp += model.running_cost(&[xp], &[a_pert], f) * dt;
            let dw = sign * z[k] * dt.sqrt();
            model.drift(&[xb], &[ab], f, &mut drift);
            xb += drift[0] * dt + dw;
            model.drift(&[xp], &[a_pert], f, &mut drift);
            xp += drift[0] * dt + dw;
        }
        let tf = flow.terminal_features();
        cb += model.terminal_cost(&[xb], tf);
        cp += model.terminal_cost(&[xp], tf);
        let d = cp - cb;
        if d.is_finite() {
            Ok(d)
        } else {
            Err(Error::NonFinite("best-response cost".into()))
        }
    };

    let diffs: Vec<f64> = (0..pairs)
        .into_par_iter()
        .map(|j| {
            let mut g = rng::stream(mc.seed, j as u64);
            let u: f64 = (j as f64 + g.gen_range(0.0..1.0)) / pairs as f64;
            let z: Vec<f64> = (0..idx.len() - 1).map(|_| StandardNormal.sample(&mut g)).collect();
            let d1 = run(flow.initial_quantile(u), &z, 1.0)?;
            let d2 = run(flow.initial_quantile(1.0 - u), &z, -1.0)?;
            Ok(0.5 * (d1 + d2))
        })
        .collect::<Result<_>>()?;
    let m = pairs as f64;
    let gap = diffs.iter().sum::<f64>() / m;
    let var = diffs.iter().map(|d| (d - gap) * (d - gap)).sum::<f64>() / (m - 1.0);
    Ok(GapEstimate {
        gap,
        std_error: (var / m).sqrt(),
        paths: 2 * pairs,
    })
}

/// Expected equilibrium cost.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CostEstimate {
    pub value: f64,
    pub std_error: f64,
    pub paths: usize,
}

/// `J(alpha*)` for a player started at `x0` against `flow`, i.e.
/// `V(t0, x0, mu_t0)`. Antithetic Brownian increments.
pub fn equilibrium_cost(
    rh: &ReducedHamiltonian,
    flow: &dyn EquilibriumFlow,
    x0: f64,
    mc: &McConfig,
) -> Result<CostEstimate> {
    if rh.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: rh.dim(),
        });
    }
    if flow.beta() != 0.0 {
        return Err(Error::CommonNoiseUnsupported(flow.beta()));
    }
    if mc.paths < 4 {
        return Err(Error::InvalidArgument("at least 4 Monte-Carlo paths are required".into()));
    }
    let times = flow.times();
    let levels = times.len() - 1;
    let model = rh.model();
    let stride = (levels / mc.steps.max(1)).max(1);
    let idx: Vec<usize> = (0..=levels).step_by(stride).collect();
    let pairs = mc.paths / 2;
    let run = |z: &[f64], sign: f64| -> Result<f64> {
        let (mut x, mut cost, mut a) = (x0, 0.0, 0.0);
        let mut drift = [0.0];
        for (k, w) in idx.windows(2).enumerate() {
            let (n, n1) = (w[0], w[1]);
            let dt = times[n1] - times[n];
            let f = flow.features(n);
            minimize_h(model, &[x], &[flow.momentum(n1, x)], f, std::slice::from_mut(&mut a))?;
            cost += model.running_cost(&[x], &[a], f) * dt;
            model.drift(&[x], &[a], f, &mut drift);
            x += drift[0] * dt + sign * z[k] * dt.sqrt();
        }
        cost += model.terminal_cost(&[x], flow.terminal_features());
        crate::error::ensure_finite(cost, "equilibrium cost")
    };
    let costs: Vec<f64> = (0..pairs)
        .into_par_iter()
        .map(|j| {
            let mut g = rng::stream(mc.seed, j as u64);
            let z: Vec<f64> = (0..idx.len() - 1).map(|_| StandardNormal.sample(&mut g)).collect();
            Ok(0.5 * (run(&z, 1.0)? + run(&z, -1.0)?))
        })
        .collect::<Result<_>>()?;
    let m = pairs as f64;
    let value = costs.iter().sum::<f64>() / m;
    let var = costs.iter().map(|c| (c - value) * (c - value)).sum::<f64>() / (m - 1.0);
    Ok(CostEstimate {
        value,
        std_error: (var / m).sqrt(),
        paths: 2 * pairs,
    })
}

/// Least-squares fit `gap ~ c eps^2`; returns `(c, R^2)`.
pub fn quadratic_fit(eps: &[f64], gaps: &[f64]) -> (f64, f64) {
    let sxx: f64 = eps.iter().map(|e| e.powi(4)).sum();
    let sxy: f64 = eps.iter().zip(gaps).map(|(e, g)| e * e * g).sum();
    let c = sxy / sxx;
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let ss_res: f64 = eps.iter().zip(gaps).map(|(e, g)| (g - c * e * e).powi(2)).sum();
    let ss_tot: f64 = gaps.iter().map(|g| (g - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (c, r2)
}
