//! Particle solver for the McKean-Vlasov FBSDE
//!
//! ```text
//! dX = d_p H^(X, Y, rho_t) dt + dB + beta dB0,   X_0 = xi
//! dY = -d_x H^(X, Y, rho_t) dt + Z dB + Z0 dB0,  Y_T = d_x G(X_T, mu_T)
//! ```
//!
//! with `rho_t` the empirical law of `(X_t, Y_t)`. The decoupling field
//! `Y_t = psi_t(X_t)` is a polynomial refitted by least squares in a
//! backward sweep and damped across Picard passes. All passes reuse the same
//! Brownian increments, so successive flows are comparable particle by
//! particle. With `beta > 0` every particle shares one common path per run.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::{FrozenHamiltonian, ReducedHamiltonian};
use crate::linalg::{polyfit, polyval};
use crate::measures::{paired_distance, JointEnsemble, ParticleEnsemble};
use crate::rng;

/// Time discretization of the particle solver.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub nt: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, nt: usize) -> Result<Self> {
        if !(t0.is_finite() && t_end.is_finite() && t_end >= t0) {
            return Err(Error::InvalidArgument(format!("time interval needs t0 <= T (got {t0}, {t_end})")));
        }
        if t_end > t0 && nt == 0 {
            return Err(Error::InvalidArgument("at least one time step is required".into()));
        }
        Ok(Self { t0, t_end, nt })
    }

    pub fn steps(&self) -> usize {
        if self.t_end > self.t0 {
            self.nt
        } else {
            0
        }
    }

    pub fn dt(&self) -> f64 {
        match self.steps() {
            0 => 0.0,
            n => (self.t_end - self.t0) / n as f64,
        }
    }

    pub fn t(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt()
    }
}

/// RNG seeds of a particle run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Seeds {
    /// Idiosyncratic noise; particle `i` draws from stream `i + 1`.
    pub idiosyncratic: u64,
    /// The common path.
    pub common: u64,
}

impl Seeds {
    pub fn from_run(seed: u64) -> Self {
        Self {
            idiosyncratic: seed,
            common: seed ^ 0xC0FF_EE00_D15E_A5E5,
        }
    }
}

/// Particle-solver settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleConfig {
    pub reg_degree: usize,
    pub max_outer: usize,
    pub tol_out: f64,
    pub damping: f64,
    /// Upper bound on the block projection used to resolve `Phi(rho_t)`.
    pub projection: usize,
    /// Largest acceptable condition number of the scaled regression design.
    pub max_condition: f64,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self {
            reg_degree: 3,
            max_outer: 60,
            tol_out: 1e-6,
            damping: 0.5,
            projection: 256,
            max_condition: 1e10,
        }
    }
}

/// Output of [`solve_particle_fbsde`].
#[derive(Debug, Clone)]
pub struct ParticlePaths {
    pub grid: TimeGrid,
    /// `x[n][i]`: particle `i` at `t_n`.
    pub x: Vec<Vec<f64>>,
    /// `y[n][i] = psi_n(x[n][i])`.
    pub y: Vec<Vec<f64>>,
    /// Realized controls.
    pub controls: Vec<Vec<f64>>,
    /// Raw monomial coefficients of `psi_n`.
    pub coefficients: Vec<Vec<f64>>,
    /// Law features of `Phi(rho_n)`.
    pub features: Vec<Vec<f64>>,
    pub terminal_features: Vec<f64>,
    pub initial: ParticleEnsemble,
    pub beta: f64,
    pub seeds: Seeds,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl ParticlePaths {
    pub fn len(&self) -> usize {
        self.initial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initial.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.grid.steps()).map(|n| self.grid.t(n)).collect()
    }

    pub fn ensemble(&self, n: usize) -> ParticleEnsemble {
        ParticleEnsemble::from_scalars(self.x[n].clone()).expect("paths are finite and nonempty")
    }

    pub fn mean(&self, n: usize) -> f64 {
        self.x[n].iter().sum::<f64>() / self.x[n].len() as f64
    }

    /// Sample variance (divisor `N`).
    pub fn variance(&self, n: usize) -> f64 {
        let m = self.mean(n);
        self.x[n].iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.x[n].len() as f64
    }
}

/// Largest divisor of `n` not exceeding `cap`.
fn block_count(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|&b| n.is_multiple_of(b)).unwrap_or(1)
}

/// Equal-weight block averages of `(x, y)` sorted by `x`.
fn block_projection(x: &[f64], y: &[f64], blocks: usize) -> Result<JointEnsemble> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let size = x.len() / blocks;
    let mut states = Vec::with_capacity(blocks);
    let mut seconds = Vec::with_capacity(blocks);
    for chunk in order.chunks(size) {
        let inv = 1.0 / chunk.len() as f64;
        states.push(chunk.iter().map(|&i| x[i]).sum::<f64>() * inv);
        seconds.push(chunk.iter().map(|&i| y[i]).sum::<f64>() * inv);
    }
    JointEnsemble::new(1, states, seconds)
}

struct Forward {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
    frozen: Vec<FrozenHamiltonian>,
}

fn normals(seed: u64, stream: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut g = rng::stream(seed, stream);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut g);
            scale * z
        })
        .collect()
}

/// Solve the FBSDE from `xi0` on `grid`; `beta` comes from the model.
pub fn solve_particle_fbsde(
    rh: &ReducedHamiltonian,
    xi0: &ParticleEnsemble,
    grid: &TimeGrid,
    seeds: Seeds,
    cfg: &ParticleConfig,
) -> Result<ParticlePaths> {
    if rh.dim() != 1 || xi0.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: if rh.dim() != 1 { rh.dim() } else { xi0.dim() },
        });
    }
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) || !(cfg.tol_out > 0.0) || cfg.projection == 0 {
        return Err(Error::InvalidArgument(
            "particle solver needs damping in (0, 1], tol_out > 0 and projection >= 1".into(),
        ));
    }
    let model = rh.model();
    let beta = model.meta().beta;
    let n_part = xi0.len();
    let steps = grid.steps();
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let degree = cfg.reg_degree.min(n_part - 1);
    let blocks = block_count(n_part, cfg.projection);

    // Increments indexed [step][particle].
    let per_particle: Vec<Vec<f64>> = (0..n_part)
        .into_par_iter()
        .map(|i| normals(seeds.idiosyncratic, i as u64 + 1, steps, sdt))
        .collect();
    let dw: Vec<Vec<f64>> = (0..steps).map(|n| per_particle.iter().map(|v| v[n]).collect()).collect();
    drop(per_particle);
    let dw0 = if beta != 0.0 {
        normals(seeds.common, 0, steps, sdt)
    } else {
        vec![0.0; steps]
    };

    let mut coef = vec![vec![0.0; degree + 1]; steps + 1];
    let mut warm: Option<Vec<Vec<f64>>> = None;
    let mut previous: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last: Option<(Forward, Vec<f64>)> = None;

    for k in 0..=cfg.max_outer {
        let fwd = forward(rh, xi0, &coef, &dw, &dw0, beta, dt, blocks, warm.as_deref())?;
        let tf = model.terminal_features(&fwd.x[steps]);
        if let Some((px, py)) = &previous {
            let r = (0..=steps)
                .map(|n| {
                    let a = paired_distance(&fwd.x[n], &px[n]);
                    let b = paired_distance(&fwd.y[n], &py[n]);
                    (a * a + b * b).sqrt()
                })
                .fold(0.0, f64::max);
            residuals.push(r);
            iterations = k;
            if r <= cfg.tol_out {
                converged = true;
                last = Some((fwd, tf));
                break;
            }
        }
        if k == cfg.max_outer {
            iterations = k;
            last = Some((fwd, tf));
            break;
        }
        let fitted = backward(model, &fwd, &tf, dt, degree, cfg.max_condition)?;
        let theta = if k == 0 { 1.0 } else { cfg.damping };
        for (c, f) in coef.iter_mut().zip(&fitted) {
            for (a, b) in c.iter_mut().zip(f) {
                *a = theta * b + (1.0 - theta) * *a;
            }
        }
        warm = Some(fwd.frozen.iter().map(|f| f.nu().seconds().to_vec()).collect());
        previous = Some((fwd.x, fwd.y));
    }
    let (fwd, terminal_features) = last.expect("at least one pass");
    Ok(ParticlePaths {
        grid: *grid,
        features: fwd.frozen.iter().map(|f| f.features().to_vec()).collect(),
        x: fwd.x,
        y: fwd.y,
        controls: fwd.controls,
        coefficients: coef,
        terminal_features,
        initial: xi0.clone(),
        beta,
        seeds,
        iterations,
        residuals,
        converged,
    })
}

#[allow(clippy::too_many_arguments)]
fn forward(
    rh: &ReducedHamiltonian,
    xi0: &ParticleEnsemble,
    coef: &[Vec<f64>],
    dw: &[Vec<f64>],
    dw0: &[f64],
    beta: f64,
    dt: f64,
    blocks: usize,
    warm: Option<&[Vec<f64>]>,
) -> Result<Forward> {
    let steps = dw.len();
    let n_part = xi0.len();
    let mut xs = Vec::with_capacity(steps + 1);
    let mut ys = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps + 1);
    let mut frozen = Vec::with_capacity(steps + 1);
    let mut x = xi0.as_slice().to_vec();
    for n in 0..=steps {
        let y: Vec<f64> = x.iter().map(|&v| polyval(&coef[n], v)).collect();
        let rho = block_projection(&x, &y, blocks)?;
        let h = rh.freeze(&rho, warm.map(|w| w[n].as_slice()))?;
        let mut a = vec![0.0; n_part];
        let mut drift = vec![0.0; n_part];
        for i in 0..n_part {
            let (_, v) = h.eval_1d(x[i], y[i], &mut a[i])?;
            drift[i] = v;
        }
        if n < steps {
            let next: Vec<f64> = (0..n_part)
                .map(|i| x[i] + drift[i] * dt + dw[n][i] + beta * dw0[n])
                .collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { step: n + 1 });
            }
            xs.push(std::mem::replace(&mut x, next));
        } else {
            xs.push(std::mem::take(&mut x));
        }
        ys.push(y);
        controls.push(a);
        frozen.push(h);
    }
    Ok(Forward {
        x: xs,
        y: ys,
        controls,
        frozen,
    })
}

fn backward(
    model: &dyn crate::hamiltonian::Lagrangian,
    fwd: &Forward,
    terminal_features: &[f64],
    dt: f64,
    degree: usize,
    max_condition: f64,
) -> Result<Vec<Vec<f64>>> {
    let steps = fwd.x.len() - 1;
    let mut out = vec![Vec::new(); steps + 1];
    let xt = &fwd.x[steps];
    let target: Vec<f64> = xt
        .iter()
        .map(|&x| {
            let mut g = [0.0];
            model.terminal_grad(&[x], terminal_features, &mut g);
            g[0]
        })
        .collect();
    out[steps] = polyfit(xt, &target, degree, max_condition, steps)?;
    let mut y_next: Vec<f64> = xt.iter().map(|&x| polyval(&out[steps], x)).collect();
    for n in (0..steps).rev() {
        let h = &fwd.frozen[n];
        let xn = &fwd.x[n];
        let mut target = Vec::with_capacity(xn.len());
        for i in 0..xn.len() {
            let mut a = fwd.controls[n][i];
            let (gx, _) = h.grads_1d(xn[i], y_next[i], &mut a)?;
            target.push(y_next[i] + dt * gx);
        }
        out[n] = polyfit(xn, &target, degree, max_condition, n)?;
        y_next = xn.iter().map(|&x| polyval(&out[n], x)).collect();
    }
    Ok(out)
}

/// Independent runs over `runs` common paths (seeds derived from `seeds`).
pub fn common_noise_runs(
    rh: &ReducedHamiltonian,
    xi0: &ParticleEnsemble,
    grid: &TimeGrid,
    seeds: Seeds,
    runs: usize,
    cfg: &ParticleConfig,
) -> Result<Vec<ParticlePaths>> {
    (0..runs)
        .into_par_iter()
        .map(|r| {
            let s = Seeds {
                idiosyncratic: seeds.idiosyncratic.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                common: seeds.common.wrapping_add(r as u64),
            };
            solve_particle_fbsde(rh, xi0, grid, s, cfg)
        })
        .collect()
}

/// Mean and variance of `X_{t_n}` pooled over runs, with the standard error
/// of each computed across runs.
pub fn pooled_moments(runs: &[ParticlePaths], n: usize) -> (f64, f64, f64, f64) {
    let r = runs.len() as f64;
    let means: Vec<f64> = runs.iter().map(|p| p.mean(n)).collect();
    let seconds: Vec<f64> = runs
        .iter()
        .map(|p| p.x[n].iter().map(|v| v * v).sum::<f64>() / p.len() as f64)
        .collect();
    let m = means.iter().sum::<f64>() / r;
    let s2 = seconds.iter().sum::<f64>() / r;
    let var = s2 - m * m;
    let sd = |v: &[f64], c: f64| (v.iter().map(|x| (x - c) * (x - c)).sum::<f64>() / (r - 1.0).max(1.0)).sqrt();
    // Delta method for var = E[X^2] - E[X]^2 across runs.
    let per_run_var: Vec<f64> = seconds.iter().zip(&means).map(|(s, mm)| s - 2.0 * m * mm).collect();
    let c = s2 - 2.0 * m * m;
    (m, var, sd(&means, m) / r.sqrt(), sd(&per_run_var, c) / r.sqrt())
}
