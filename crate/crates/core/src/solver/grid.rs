//! One-dimensional finite-difference solver for the MFGC system with
//! `beta = 0`.
//!
//! The backward HJB step is semi-implicit: implicit `u_xx / 2`, explicit
//! `H^(x, u_x, rho)`. At the two end nodes the second difference is taken
//! equal to that of the neighbouring node (quadratic extrapolation), which
//! keeps quadratic profiles exact. The forward Fokker-Planck step is a nodal
//! finite-volume scheme with trapezoidal control volumes, zero flux at the
//! ends and the exponentially fitted (Scharfetter-Gummel) upwind flux,
//! solved implicitly. Its matrix is an M-matrix whose columns conserve mass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hamiltonian::{FrozenHamiltonian, ReducedHamiltonian};
use crate::linalg::thomas;
use crate::measures::{paired_distance, DensityGrid1d, JointEnsemble};

/// Half-width of the default domain in initial standard deviations.
pub const DOMAIN_STDS: f64 = 8.0;
/// Largest mass change one Fokker-Planck step may make before renormalizing.
pub const MASS_DRIFT_LIMIT: f64 = 1e-10;
/// Most negative density value tolerated (and clipped) after a step.
pub const NEGATIVE_LIMIT: f64 = -1e-9;

/// Space-time grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub t0: f64,
    pub t_end: f64,
    pub nt: usize,
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, nx: usize, t0: f64, t_end: f64, nt: usize) -> Result<Self> {
        let g = Self {
            x_min,
            x_max,
            nx,
            t0,
            t_end,
            nt,
        };
        g.validate()?;
        Ok(g)
    }

    /// Domain `mean +- 8 std` (plus `allowance` on each side).
    pub fn around(mean: f64, std: f64, allowance: f64, nx: usize, t0: f64, t_end: f64, nt: usize) -> Result<Self> {
        let half = DOMAIN_STDS * std + allowance;
        Self::new(mean - half, mean + half, nx, t0, t_end, nt)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.t0, self.t_end].iter().all(|v| v.is_finite());
        if !finite || !(self.x_max > self.x_min) {
            return Err(Error::InvalidArgument(format!(
                "grid needs finite x_min < x_max (got {}, {})",
                self.x_min, self.x_max
            )));
        }
        if self.nx < 16 {
            return Err(Error::InvalidArgument(format!("grid needs nx >= 16 (got {})", self.nx)));
        }
        if self.t_end < self.t0 {
            return Err(Error::InvalidArgument(format!(
                "time interval needs t0 <= T (got {}, {})",
                self.t0, self.t_end
            )));
        }
        if self.t_end > self.t0 && self.nt < 2 {
            return Err(Error::InvalidArgument(format!("grid needs nt >= 2 (got {})", self.nt)));
        }
        Ok(())
    }

    /// Number of time steps actually taken (0 on an empty horizon).
    pub fn steps(&self) -> usize {
        if self.t_end > self.t0 {
            self.nt
        } else {
            0
        }
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        match self.steps() {
            0 => 0.0,
            n => (self.t_end - self.t0) / n as f64,
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn t(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|n| self.t(n)).collect()
    }

    /// The same spatial grid on `[t0, T]` with (as nearly as possible) the
    /// same time step.
    pub fn restarted_at(&self, t0: f64) -> Result<Self> {
        let dt = self.dt();
        let nt = if dt > 0.0 {
            ((self.t_end - t0) / dt).round().max(0.0) as usize
        } else {
            0
        };
        let nt = if nt > 0 { nt.max(2) } else { self.nt };
        Self::new(self.x_min, self.x_max, self.nx, t0, self.t_end, nt)
    }

    /// Indices of nodes within `[lo, hi]`.
    pub fn nodes_within(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let dx = self.dx();
        let a = ((lo - self.x_min) / dx).ceil().max(0.0) as usize;
        let b = (((hi - self.x_min) / dx).floor() as isize + 1).clamp(0, self.nx as isize) as usize;
        a.min(b)..b
    }

    fn same_space(&self, m: &DensityGrid1d) -> bool {
        m.len() == self.nx
            && (m.x_min() - self.x_min).abs() <= 1e-12 * (1.0 + self.x_min.abs())
            && (m.dx() - self.dx()).abs() <= 1e-12 * self.dx()
    }
}

/// Outer-loop settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Fictitious-play weight on the momentum coordinates.
    pub damping: f64,
    pub max_outer: usize,
    pub tol_out: f64,
    /// Particles in the quantile projection representing `rho_t`.
    pub projection: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_outer: 100,
            tol_out: 1e-6,
            projection: 128,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("damping must lie in (0, 1] (got {})", self.damping)));
        }
        if !(self.tol_out > 0.0) || self.projection == 0 {
            return Err(Error::InvalidArgument("tol_out > 0 and projection >= 1 are required".into()));
        }
        Ok(())
    }
}

/// Equilibrium output of [`equilibrium_picard`].
#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub grid: GridSpec,
    /// `u[n][i] = u(t_n, x_i)`.
    pub u: Vec<Vec<f64>>,
    pub du: Vec<Vec<f64>>,
    pub mu: Vec<DensityGrid1d>,
    /// `(id, d_x u(t_n, .)) # mu_n` on the quantile projection of `mu_n`.
    pub rho: Vec<JointEnsemble>,
    /// Controls of `Phi(rho_n)` as used by the last sweep.
    pub controls: Vec<Vec<f64>>,
    /// Law features of `Phi(rho_n)` as used by the last sweep.
    pub features: Vec<Vec<f64>>,
    /// Terminal-cost features of `mu_T`.
    pub terminal_features: Vec<f64>,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
    /// Largest pre-renormalization mass change of any Fokker-Planck step.
    pub max_mass_drift: f64,
    /// `dt max|d_p H^| / dx` over the run.
    pub cfl: f64,
}

impl FlowSolution {
    pub fn times(&self) -> Vec<f64> {
        self.grid.times()
    }

    /// `d_x u(t_n, x)` by linear interpolation (flat outside the grid).
    pub fn du_at(&self, n: usize, x: f64) -> f64 {
        interp(&self.grid, &self.du[n], x)
    }

    pub fn u_at(&self, n: usize, x: f64) -> f64 {
        interp(&self.grid, &self.u[n], x)
    }
}

/// Linear interpolation of nodal values, constant beyond the ends.
pub fn interp(grid: &GridSpec, v: &[f64], x: f64) -> f64 {
    let s = ((x - grid.x_min) / grid.dx()).clamp(0.0, (grid.nx - 1) as f64);
    let i = (s.floor() as usize).min(grid.nx - 2);
    let w = s - i as f64;
    (1.0 - w) * v[i] + w * v[i + 1]
}

/// First derivative: central inside, second-order one-sided at the ends.
pub fn derivative(u: &[f64], dx: f64) -> Vec<f64> {
    let n = u.len();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        d[i] = (u[i + 1] - u[i - 1]) / (2.0 * dx);
    }
    d[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dx);
    d[n - 1] = (3.0 * u[n - 1] - 4.0 * u[n - 2] + u[n - 3]) / (2.0 * dx);
    d
}

/// Second derivative with end values copied from the neighbours.
pub fn second_derivative(u: &[f64], dx: f64) -> Vec<f64> {
    let n = u.len();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        d[i] = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (dx * dx);
    }
    d[0] = d[1];
    d[n - 1] = d[n - 2];
    d
}

fn terminal_values(rh: &ReducedHamiltonian, grid: &GridSpec, features: &[f64]) -> Vec<f64> {
    let model = rh.model();
    (0..grid.nx).map(|i| model.terminal_cost(&[grid.x(i)], features)).collect()
}

fn check_1d(rh: &ReducedHamiltonian) -> Result<()> {
    if rh.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: rh.dim(),
        });
    }
    if rh.model().meta().beta != 0.0 {
        return Err(Error::CommonNoiseUnsupported(rh.model().meta().beta));
    }
    Ok(())
}

fn hjb_frozen(frozen: &[FrozenHamiltonian], terminal: Vec<f64>, grid: &GridSpec) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let nx = grid.nx;
    let steps = grid.steps();
    let (dx, dt) = (grid.dx(), grid.dt());
    let c = 0.5 * dt / (dx * dx);
    let mut lower = vec![-c; nx];
    let mut diag = vec![1.0 + 2.0 * c; nx];
    let mut upper = vec![-c; nx];
    // End rows: (row 0) - (row 1), so that u_0 - u_1 = r_0 - r_1.
    diag[0] = 1.0;
    upper[0] = -1.0;
    lower[0] = 0.0;
    diag[nx - 1] = 1.0;
    lower[nx - 1] = -1.0;
    upper[nx - 1] = 0.0;

    let mut u = vec![Vec::new(); steps + 1];
    let mut du = vec![Vec::new(); steps + 1];
    du[steps] = derivative(&terminal, dx);
    u[steps] = terminal;
    let mut warm = vec![0.0; nx];
    let mut rhs = vec![0.0; nx];
    for n in (0..steps).rev() {
        let h = &frozen[n + 1];
        let (next, p) = (&u[n + 1], &du[n + 1]);
        for i in 0..nx {
            let (ham, _) = h.eval_1d(grid.x(i), p[i], &mut warm[i])?;
            rhs[i] = next[i] + dt * ham;
        }
        let (r0, r1) = (rhs[0], rhs[1]);
        rhs[0] = r0 - r1;
        let (ra, rb) = (rhs[nx - 1], rhs[nx - 2]);
        rhs[nx - 1] = ra - rb;
        let sol = thomas(&lower, &diag, &upper, &rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: n });
        }
        du[n] = derivative(&sol, dx);
        u[n] = sol;
    }
    Ok((u, du))
}

/// `z / (e^z - 1)`.
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-12 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

struct FpOutput {
    mu: Vec<DensityGrid1d>,
    max_mass_drift: f64,
    cfl: f64,
}

fn fp_frozen(frozen: &[FrozenHamiltonian], du: &[Vec<f64>], mu0: &DensityGrid1d, grid: &GridSpec) -> Result<FpOutput> {
    let nx = grid.nx;
    let steps = grid.steps();
    let (dx, dt) = (grid.dx(), grid.dt());
    let diff = 0.5;
    let mut weights = vec![dx; nx];
    weights[0] = 0.5 * dx;
    weights[nx - 1] = 0.5 * dx;
    let mut mu = Vec::with_capacity(steps + 1);
    mu.push(mu0.clone());
    let mut max_drift = 0.0f64;
    let mut vmax = 0.0f64;
    let mut warm = vec![0.0; nx - 1];
    let mut lower = vec![0.0; nx];
    let mut diag = vec![0.0; nx];
    let mut upper = vec![0.0; nx];
    let mut rhs = vec![0.0; nx];
    for n in 0..steps {
        let h = &frozen[n];
        let prev = mu[n].values();
        for i in 0..nx {
            diag[i] = weights[i] / dt;
            lower[i] = 0.0;
            upper[i] = 0.0;
            rhs[i] = weights[i] / dt * prev[i];
        }
        for i in 0..nx - 1 {
            let xm = grid.x(i) + 0.5 * dx;
            let pm = 0.5 * (du[n][i] + du[n][i + 1]);
            let (_, v) = h.eval_1d(xm, pm, &mut warm[i])?;
            vmax = vmax.max(v.abs());
            let w = v * dx / diff;
            let k = diff / dx;
            // Flux F = k (B(-w) m_i - B(w) m_{i+1}) leaves node i, enters i+1.
            diag[i] += k * bernoulli(-w);
            upper[i] -= k * bernoulli(w);
            lower[i + 1] -= k * bernoulli(-w);
            diag[i + 1] += k * bernoulli(w);
        }
        let next = thomas(&lower, &diag, &upper, &rhs)?;
        let before: f64 = prev.iter().zip(&weights).map(|(m, w)| m * w).sum();
        let after: f64 = next.iter().zip(&weights).map(|(m, w)| m * w).sum();
        if !after.is_finite() {
            return Err(Error::BlowUp { step: n + 1 });
        }
        let drift = (after - before).abs();
        if drift > MASS_DRIFT_LIMIT {
            return Err(Error::MassDrift { step: n + 1, drift });
        }
        max_drift = max_drift.max(drift);
        let low = next.iter().cloned().fold(f64::INFINITY, f64::min);
        if low < NEGATIVE_LIMIT {
            return Err(Error::NegativeDensity { step: n + 1, value: low });
        }
        let clipped: Vec<f64> = next.into_iter().map(|v| v.max(0.0)).collect();
        mu.push(DensityGrid1d::new(grid.x_min, dx, clipped)?);
    }
    Ok(FpOutput {
        mu,
        max_mass_drift: max_drift,
        cfl: dt * vmax / dx,
    })
}

fn freeze_all(rh: &ReducedHamiltonian, rho: &[JointEnsemble], warm: Option<&[Vec<f64>]>) -> Result<Vec<FrozenHamiltonian>> {
    (0..rho.len())
        .into_par_iter()
        .map(|n| rh.freeze(&rho[n], warm.map(|w| w[n].as_slice())))
        .collect()
}

fn terminal_features(rh: &ReducedHamiltonian, mu_t: &DensityGrid1d, projection: usize) -> Result<Vec<f64>> {
    let proj = mu_t.quantile_projection(projection)?;
    Ok(rh.model().terminal_features(proj.as_slice()))
}

/// Backward HJB sweep for a given joint-law flow; `u(T) = G(., mu_T)` with
/// `mu_T` the first marginal of the last `rho`.
pub fn solve_hjb_backward(
    rh: &ReducedHamiltonian,
    rho_flow: &[JointEnsemble],
    grid: &GridSpec,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    check_1d(rh)?;
    grid.validate()?;
    if rho_flow.len() != grid.steps() + 1 {
        return Err(Error::SizeMismatch {
            left: grid.steps() + 1,
            right: rho_flow.len(),
        });
    }
    let frozen = freeze_all(rh, rho_flow, None)?;
    let feats = rh.model().terminal_features(rho_flow[grid.steps()].states());
    hjb_frozen(&frozen, terminal_values(rh, grid, &feats), grid)
}

/// Forward Fokker-Planck sweep under the drift `d_p H^(x, du, rho_n)`.
pub fn solve_fp_forward(
    rh: &ReducedHamiltonian,
    du: &[Vec<f64>],
    rho_flow: &[JointEnsemble],
    mu0: &DensityGrid1d,
    grid: &GridSpec,
) -> Result<Vec<DensityGrid1d>> {
    check_1d(rh)?;
    grid.validate()?;
    if !grid.same_space(mu0) {
        return Err(Error::GridMismatch);
    }
    let n = grid.steps() + 1;
    if rho_flow.len() != n || du.len() != n {
        return Err(Error::SizeMismatch {
            left: n,
            right: rho_flow.len().min(du.len()),
        });
    }
    let frozen = freeze_all(rh, rho_flow, None)?;
    Ok(fp_frozen(&frozen, du, mu0, grid)?.mu)
}

fn project(mu: &DensityGrid1d, du: &[f64], grid: &GridSpec, projection: usize) -> Result<JointEnsemble> {
    let states = mu.quantile_projection(projection)?.into_vec();
    let seconds = states.iter().map(|&x| interp(grid, du, x)).collect();
    JointEnsemble::new(1, states, seconds)
}

fn flow_distance(a: &[JointEnsemble], b: &[JointEnsemble]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(a, b)| {
            let s = paired_distance(a.states(), b.states());
            let p = paired_distance(a.seconds(), b.seconds());
            (s * s + p * p).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Fictitious-play fixed point of the MFGC system on `grid`.
///
/// Each pass freezes `H^` along the current joint-law guess, sweeps HJB
/// backward and Fokker-Planck forward, and rebuilds `rho_t` from `mu_t` and
/// `d_x u`. The guess moves to the new states and a `damping`-weighted
/// average of the momenta. The residual of pass `k` is the sup over time of
/// the index-paired distance between the flows produced by passes `k` and
/// `k - 1` (pass 0 compares with its input), which bounds `W_2` above.
/// Exhausting `max_outer` returns the last iterate with `converged = false`.
pub fn equilibrium_picard(
    rh: &ReducedHamiltonian,
    mu0: &DensityGrid1d,
    grid: &GridSpec,
    cfg: &SolverConfig,
    warm: Option<&FlowSolution>,
) -> Result<FlowSolution> {
    check_1d(rh)?;
    grid.validate()?;
    cfg.validate()?;
    if !grid.same_space(mu0) {
        return Err(Error::GridMismatch);
    }
    let steps = grid.steps();
    let p = cfg.projection;
    let proj0 = mu0.quantile_projection(p)?.into_vec();

    let warm = warm.filter(|w| w.rho.len() == steps + 1 && w.rho[0].len() == p);
    let (mut guess, mut controls): (Vec<JointEnsemble>, Option<Vec<Vec<f64>>>) = match warm {
        Some(w) => (w.rho.clone(), Some(w.controls.clone())),
        None => {
            let zero = JointEnsemble::new(1, proj0.clone(), vec![0.0; p])?;
            (vec![zero; steps + 1], None)
        }
    };
    let mut previous: Option<Vec<JointEnsemble>> = None;
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last = None;
    for k in 0..=cfg.max_outer {
        let frozen = freeze_all(rh, &guess, controls.as_deref())?;
        let feats = rh.model().terminal_features(guess[steps].states());
        let (u, du) = hjb_frozen(&frozen, terminal_values(rh, grid, &feats), grid)?;
        let fp = fp_frozen(&frozen, &du, mu0, grid)?;
        let out: Vec<JointEnsemble> = fp
            .mu
            .iter()
            .zip(&du)
            .map(|(m, d)| project(m, d, grid, p))
            .collect::<Result<_>>()?;
        let residual = flow_distance(&out, previous.as_deref().unwrap_or(&guess));
        residuals.push(residual);
        iterations = k;
        let ctrl: Vec<Vec<f64>> = frozen.iter().map(|f| f.nu().seconds().to_vec()).collect();
        let features: Vec<Vec<f64>> = frozen.iter().map(|f| f.features().to_vec()).collect();
        let theta = cfg.damping;
        guess = out
            .iter()
            .zip(&guess)
            .map(|(o, g)| {
                let s = o.seconds().iter().zip(g.seconds()).map(|(a, b)| theta * a + (1.0 - theta) * b).collect();
                o.with_seconds(s)
            })
            .collect::<Result<_>>()?;
        controls = Some(ctrl.clone());
        last = Some((u, du, fp, out.clone(), ctrl, features));
        previous = Some(out);
        if residual <= cfg.tol_out {
            converged = true;
            break;
        }
    }
    let (mut u, mut du, fp, rho, controls, features) = last.expect("at least one pass");
    // Re-impose the terminal condition against the returned mu_T.
    let tf = terminal_features(rh, &fp.mu[steps], p)?;
    u[steps] = terminal_values(rh, grid, &tf);
    du[steps] = derivative(&u[steps], grid.dx());
    Ok(FlowSolution {
        grid: *grid,
        u,
        du,
        mu: fp.mu,
        rho,
        controls,
        features,
        terminal_features: tf,
        iterations,
        residuals,
        converged,
        max_mass_drift: fp.max_mass_drift,
        cfl: fp.cfl,
    })
}
