//! Master field `V(t, x, mu)` evaluated from equilibrium flows, and the
//! checks built on it: master-equation residual, monotonicity propagation,
//! Lipschitz ratios, `d_x d_mu V` by finite differences and semigroup
//! consistency.
//!
//! On the grid an empirical measure is represented by a Gaussian kernel
//! density whose bandwidth is fixed once per query, so perturbing one
//! particle moves the density smoothly.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{ensure_finite, Error, Result};
use crate::hamiltonian::ReducedHamiltonian;
use crate::linalg::{polyval, CubicSpline};
use crate::measures::{wasserstein, DensityGrid1d, Order, ParticleEnsemble};
use crate::monotonicity::{self, disp_gap_cross, GapKind, MonotonicityReport, SamplerConfig};
use crate::oracle::RiccatiOracle;
use crate::solver::{
    equilibrium_cost, equilibrium_picard, grid::interp, solve_particle_fbsde, FlowSolution, GridSpec, McConfig,
    ParticleConfig, Seeds, SolverConfig, TimeGrid,
};

/// Largest ensemble accepted by the particle-perturbation stencils.
pub const MAX_STENCIL_PARTICLES: usize = 64;
/// Pairs closer than this are skipped by [`lipschitz_estimate`].
pub const MIN_PAIR_DISTANCE: f64 = 1e-10;

/// Initial law of a query.
#[derive(Debug, Clone)]
pub enum InitialLaw {
    Particles(ParticleEnsemble),
    Density(DensityGrid1d),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Grid,
    Particle,
}

/// Arguments of `V(t0, x, mu0)`.
#[derive(Debug, Clone)]
pub struct ValueQuery {
    pub t0: f64,
    pub x: f64,
    pub mu0: InitialLaw,
    pub method: Method,
}

/// Discretization shared by every solve of a [`ValueSolver`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueConfig {
    pub t_end: f64,
    /// Spatial nodes for measures given as particles.
    pub nx: usize,
    /// Time step; grids starting at any `t0` reuse it.
    pub dt: f64,
    pub solver: SolverConfig,
    /// Kernel bandwidth for particle measures; Silverman's rule when absent.
    pub bandwidth: Option<f64>,
    /// Particle method: ensemble size when `mu0` is a density.
    pub particles: usize,
    pub particle: ParticleConfig,
    pub mc: McConfig,
    pub seed: u64,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            t_end: 1.0,
            nx: 200,
            dt: 1e-3,
            solver: SolverConfig::default(),
            bandwidth: None,
            particles: 4000,
            particle: ParticleConfig::default(),
            mc: McConfig::default(),
            seed: 0,
        }
    }
}

/// Spatial extent of a grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Space {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
}

impl Space {
    /// Covers `mean +- 8 s` and `[min - 8h, max + 8h]` of every ensemble,
    /// with `s^2 = var + h^2` the variance of the kernel density.
    pub fn covering(ensembles: &[&ParticleEnsemble], bandwidth: f64, nx: usize) -> Result<Self> {
        if ensembles.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for e in ensembles {
            check_scalar(e)?;
            let (m, v) = (e.mean()[0], e.variance()[0]);
            let s = (v + bandwidth * bandwidth).sqrt();
            let (a, b) = e
                .as_slice()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            lo = lo.min(m - 8.0 * s).min(a - 8.0 * bandwidth);
            hi = hi.max(m + 8.0 * s).max(b + 8.0 * bandwidth);
        }
        Ok(Self { x_min: lo, x_max: hi, nx })
    }

    pub fn of_density(m: &DensityGrid1d) -> Self {
        Self {
            x_min: m.x_min(),
            x_max: m.x_max(),
            nx: m.len(),
        }
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    /// Central half of the domain, clear of boundary effects.
    pub fn interior(&self) -> (f64, f64) {
        let q = 0.25 * (self.x_max - self.x_min);
        (self.x_min + q, self.x_max - q)
    }

    pub fn grid(&self, t0: f64, t_end: f64, dt: f64) -> Result<GridSpec> {
        let nt = if t_end > t0 {
            (((t_end - t0) / dt).round() as usize).max(2)
        } else {
            0
        };
        GridSpec::new(self.x_min, self.x_max, self.nx, t0, t_end, nt)
    }
}

fn check_scalar(mu: &ParticleEnsemble) -> Result<()> {
    if mu.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: mu.dim(),
        });
    }
    Ok(())
}

/// Silverman's rule `1.06 sigma N^(-1/5)`; a point mass uses `sigma = 1`.
pub fn silverman_bandwidth(mu: &ParticleEnsemble) -> f64 {
    let v = mu.variance()[0];
    let sigma = if v > 0.0 { v.sqrt() } else { 1.0 };
    1.06 * sigma * (mu.len() as f64).powf(-0.2)
}

/// Gaussian kernel density of `mu` on `space`.
pub fn kernel_density(mu: &ParticleEnsemble, bandwidth: f64, space: &Space) -> Result<DensityGrid1d> {
    check_scalar(mu)?;
    if !(bandwidth >= space.dx()) {
        return Err(Error::InvalidArgument(format!(
            "kernel bandwidth {bandwidth} is below the grid spacing {}",
            space.dx()
        )));
    }
    let dx = space.dx();
    let values = (0..space.nx)
        .map(|i| {
            let x = space.x_min + i as f64 * dx;
            mu.as_slice()
                .iter()
                .map(|&p| {
                    let z = (x - p) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    DensityGrid1d::new(space.x_min, dx, values)
}

/// `x -> V(t, x, mu)` for fixed `(t, mu)`.
#[derive(Clone)]
pub struct ValueSlice {
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for ValueSlice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ValueSlice")
    }
}

impl ValueSlice {
    pub fn new(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f) }
    }

    /// Cubic spline through nodal values.
    pub fn from_nodes(grid: &GridSpec, u: &[f64]) -> Result<Self> {
        let s = CubicSpline::new(grid.x_min, grid.dx(), u)?;
        Ok(Self::new(move |x| s.value(x)))
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    /// Central difference with step `h`.
    pub fn gradient(&self, x: f64, h: f64) -> f64 {
        (self.eval(x + h) - self.eval(x - h)) / (2.0 * h)
    }

    pub fn hessian(&self, x: f64, h: f64) -> f64 {
        (self.eval(x + h) - 2.0 * self.eval(x) + self.eval(x - h)) / (h * h)
    }
}

/// A master field the finite-difference stencils can probe.
pub trait ValueField: Sync {
    fn horizon(&self) -> f64;

    /// Slices at time `t` for each measure. `mus[0]` is the base measure and
    /// the rest are small perturbations of it, so implementations may warm
    /// start from the base.
    fn slices(&self, t: f64, mus: &[ParticleEnsemble]) -> Result<Vec<ValueSlice>>;
}

/// Riccati closed form `V(t, x, mu)`; depends on `mu` through its mean.
#[derive(Debug, Clone)]
pub struct OracleField {
    pub oracle: RiccatiOracle,
}

impl ValueField for OracleField {
    fn horizon(&self) -> f64 {
        self.oracle.horizon().1
    }

    fn slices(&self, t: f64, mus: &[ParticleEnsemble]) -> Result<Vec<ValueSlice>> {
        mus.iter()
            .map(|mu| {
                check_scalar(mu)?;
                let m = mu.mean()[0];
                let o = self.oracle.clone();
                Ok(ValueSlice::new(move |x| o.value(t, x, m)))
            })
            .collect()
    }
}

/// Grid-solver field with the space and kernel bandwidth frozen.
pub struct GridField<'a> {
    solver: &'a ValueSolver,
    space: Space,
    bandwidth: f64,
}

impl GridField<'_> {
    pub fn space(&self) -> Space {
        self.space
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Equilibrium flows for each measure (`mus[0]` solved first, the rest
    /// warm-started from it).
    pub fn flows(&self, t: f64, mus: &[ParticleEnsemble]) -> Result<Vec<FlowSolution>> {
        let Some((base, rest)) = mus.split_first() else {
            return Ok(Vec::new());
        };
        let b = self.solver.solve(&kernel_density(base, self.bandwidth, &self.space)?, t, None)?;
        let mut out: Vec<FlowSolution> = rest
            .par_iter()
            .map(|mu| self.solver.solve(&kernel_density(mu, self.bandwidth, &self.space)?, t, Some(&b)))
            .collect::<Result<_>>()?;
        out.insert(0, b);
        Ok(out)
    }
}

impl ValueField for GridField<'_> {
    fn horizon(&self) -> f64 {
        self.solver.cfg.t_end
    }

    fn slices(&self, t: f64, mus: &[ParticleEnsemble]) -> Result<Vec<ValueSlice>> {
        self.flows(t, mus)?
            .iter()
            .map(|f| ValueSlice::from_nodes(&f.grid, &f.u[0]))
            .collect()
    }
}

/// Value and its first two `x` derivatives at a point.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ValuePoint {
    pub t0: f64,
    pub x: f64,
    pub value: f64,
    pub gradient: f64,
    pub hessian: f64,
    /// Monte-Carlo standard error of `value` (particle method only).
    pub std_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Evaluates `V` by solving the equilibrium from `(t0, mu0)`.
#[derive(Debug, Clone)]
pub struct ValueSolver {
    rh: ReducedHamiltonian,
    cfg: ValueConfig,
}

impl ValueSolver {
    pub fn new(rh: ReducedHamiltonian, cfg: ValueConfig) -> Result<Self> {
        if rh.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: rh.dim(),
            });
        }
        if !(cfg.t_end.is_finite() && cfg.t_end >= 0.0) || !(cfg.dt > 0.0) || cfg.nx < 16 {
            return Err(Error::InvalidArgument(format!(
                "value solver needs T >= 0, dt > 0 and nx >= 16 (got T = {}, dt = {}, nx = {})",
                cfg.t_end, cfg.dt, cfg.nx
            )));
        }
        if let Some(h) = cfg.bandwidth {
            if !(h > 0.0) {
                return Err(Error::InvalidArgument(format!("bandwidth must be positive (got {h})")));
            }
        }
        cfg.solver.validate()?;
        Ok(Self { rh, cfg })
    }

    pub fn config(&self) -> &ValueConfig {
        &self.cfg
    }

    pub fn hamiltonian(&self) -> &ReducedHamiltonian {
        &self.rh
    }

    fn check_time(&self, t0: f64) -> Result<()> {
        if !(t0 >= 0.0 && t0 <= self.cfg.t_end) {
            return Err(Error::InvalidArgument(format!(
                "t0 = {t0} lies outside [0, {}]",
                self.cfg.t_end
            )));
        }
        Ok(())
    }

    pub fn bandwidth_for(&self, mu: &ParticleEnsemble) -> f64 {
        self.cfg.bandwidth.unwrap_or_else(|| silverman_bandwidth(mu))
    }

    /// Grid field whose space and bandwidth are fixed by `base`.
    pub fn field(&self, base: &ParticleEnsemble) -> Result<GridField<'_>> {
        let bandwidth = self.bandwidth_for(base);
        let space = Space::covering(&[base], bandwidth, self.cfg.nx)?;
        Ok(GridField {
            solver: self,
            space,
            bandwidth,
        })
    }

    /// Equilibrium on `[t0, T]` from the density `mu0` (on its own grid).
    pub fn solve(&self, mu0: &DensityGrid1d, t0: f64, warm: Option<&FlowSolution>) -> Result<FlowSolution> {
        self.check_time(t0)?;
        let grid = Space::of_density(mu0).grid(t0, self.cfg.t_end, self.cfg.dt)?;
        equilibrium_picard(&self.rh, mu0, &grid, &self.cfg.solver, warm)
    }

    pub fn evaluate(&self, q: &ValueQuery) -> Result<ValuePoint> {
        self.check_time(q.t0)?;
        ensure_finite(q.x, "query point")?;
        if q.t0 == self.cfg.t_end {
            return self.terminal(q);
        }
        match q.method {
            Method::Grid => self.evaluate_grid(q),
            Method::Particle => self.evaluate_particle(q),
        }
    }

    pub fn value(&self, q: &ValueQuery) -> Result<f64> {
        Ok(self.evaluate(q)?.value)
    }

    pub fn value_gradient(&self, q: &ValueQuery) -> Result<f64> {
        Ok(self.evaluate(q)?.gradient)
    }

    pub fn value_hessian(&self, q: &ValueQuery) -> Result<f64> {
        Ok(self.evaluate(q)?.hessian)
    }

    fn terminal(&self, q: &ValueQuery) -> Result<ValuePoint> {
        let model = self.rh.model();
        let features = match &q.mu0 {
            InitialLaw::Particles(p) => {
                check_scalar(p)?;
                model.terminal_features(p.as_slice())
            }
            InitialLaw::Density(d) => {
                model.terminal_features(d.quantile_projection(self.cfg.solver.projection)?.as_slice())
            }
        };
        let (mut g, mut h) = ([0.0], [0.0]);
        model.terminal_grad(&[q.x], &features, &mut g);
        model.terminal_hess(&[q.x], &features, &mut h);
        Ok(ValuePoint {
            t0: q.t0,
            x: q.x,
            value: model.terminal_cost(&[q.x], &features),
            gradient: g[0],
            hessian: h[0],
            std_error: 0.0,
            iterations: 0,
            converged: true,
        })
    }

    fn evaluate_grid(&self, q: &ValueQuery) -> Result<ValuePoint> {
        let sol = match &q.mu0 {
            InitialLaw::Density(d) => self.solve(d, q.t0, None)?,
            InitialLaw::Particles(p) => self.field(p)?.flows(q.t0, std::slice::from_ref(p))?.remove(0),
        };
        let dx = sol.grid.dx();
        let s = ValueSlice::from_nodes(&sol.grid, &sol.u[0])?;
        Ok(ValuePoint {
            t0: q.t0,
            x: q.x,
            value: s.eval(q.x),
            gradient: s.gradient(q.x, dx),
            hessian: s.hessian(q.x, dx),
            std_error: 0.0,
            iterations: sol.iterations,
            converged: sol.converged,
        })
    }

    fn evaluate_particle(&self, q: &ValueQuery) -> Result<ValuePoint> {
        let xi0 = match &q.mu0 {
            InitialLaw::Particles(p) => p.clone(),
            InitialLaw::Density(d) => d.sample(self.cfg.particles, self.cfg.seed)?,
        };
        let nt = (((self.cfg.t_end - q.t0) / self.cfg.dt).round() as usize).max(1);
        let grid = TimeGrid::new(q.t0, self.cfg.t_end, nt)?;
        let paths = solve_particle_fbsde(&self.rh, &xi0, &grid, Seeds::from_run(self.cfg.seed), &self.cfg.particle)?;
        let cost = equilibrium_cost(&self.rh, &paths, q.x, &self.cfg.mc)?;
        let c = &paths.coefficients[0];
        let dc: Vec<f64> = c.iter().enumerate().skip(1).map(|(k, v)| k as f64 * v).collect();
        Ok(ValuePoint {
            t0: q.t0,
            x: q.x,
            value: cost.value,
            gradient: polyval(c, q.x),
            hessian: polyval(&dc, q.x),
            std_error: cost.std_error,
            iterations: paths.iterations,
            converged: paths.converged,
        })
    }
}

/// Finite-difference steps of the measure stencils.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdConfig {
    pub t_step: f64,
    pub x_step: f64,
    pub particle_step: f64,
    /// Remove the `d_mu d_mu V` contamination of the single-particle second
    /// difference using a neighbouring particle pair.
    pub diagonal_correction: bool,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            t_step: 1e-3,
            x_step: 1e-4,
            particle_step: 1e-3,
            diagonal_correction: true,
        }
    }
}

impl FdConfig {
    fn validate(&self) -> Result<()> {
        for (name, h) in [
            ("t_step", self.t_step),
            ("x_step", self.x_step),
            ("particle_step", self.particle_step),
        ] {
            if !(h >= 1e-12) || !h.is_finite() {
                return Err(Error::StepUnderflow(format!("{name} = {h:e} (minimum 1e-12)")));
            }
        }
        Ok(())
    }
}

fn check_stencil_ensemble(rh: &ReducedHamiltonian, mu0: &ParticleEnsemble) -> Result<()> {
    check_scalar(mu0)?;
    if rh.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: rh.dim(),
        });
    }
    let beta = rh.model().meta().beta;
    if beta != 0.0 {
        return Err(Error::CommonNoiseUnsupported(beta));
    }
    if mu0.len() > MAX_STENCIL_PARTICLES {
        return Err(Error::TooLarge {
            n: mu0.len(),
            cap: MAX_STENCIL_PARTICLES,
        });
    }
    Ok(())
}

fn shifted(mu: &ParticleEnsemble, moves: &[(usize, f64)]) -> Result<ParticleEnsemble> {
    let mut v = mu.as_slice().to_vec();
    for &(j, d) in moves {
        v[j] += d;
    }
    ParticleEnsemble::from_scalars(v)
}

/// Terms of the master equation at one point.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ResidualPoint {
    pub x: f64,
    pub dt_v: f64,
    pub dx_v: f64,
    pub dxx_v: f64,
    pub hamiltonian: f64,
    pub measure_term: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MasterResidual {
    pub t0: f64,
    pub particles: usize,
    pub fd: FdConfig,
    pub points: Vec<ResidualPoint>,
    pub max_abs: f64,
    pub solves: usize,
}

/// Residual of the `beta = 0` master equation
/// `d_t V + d_xx V / 2 + H^(x, d_x V, rho) + M V = 0` at `(t0, x, mu0)` for
/// each `x` in `xs`, with `rho = (id, d_x V)#mu0` and
/// `M V = E~[d_x~ d_mu V / 2 + d_mu V . d_p H^(x~, d_x V(x~), rho)]`.
///
/// `d_t V` is the three-point one-sided difference (forward unless `t0` is
/// within two steps of `T`). `d_mu V` at particle `j` is `N` times the
/// central difference in `x~_j`; `d_x~ d_mu V` is `N` times the second
/// difference minus `N` times the mixed difference with the nearest
/// particle, which removes the `d_mu d_mu V / N` part.
pub fn master_residual(
    field: &dyn ValueField,
    rh: &ReducedHamiltonian,
    t0: f64,
    xs: &[f64],
    mu0: &ParticleEnsemble,
    fd: &FdConfig,
) -> Result<MasterResidual> {
    check_stencil_ensemble(rh, mu0)?;
    fd.validate()?;
    let t_end = field.horizon();
    let h = fd.t_step;
    let forward = t0 + 2.0 * h <= t_end + 1e-12 * t_end.abs().max(1.0);
    if !forward && t0 - 2.0 * h < -1e-12 {
        return Err(Error::InvalidArgument(format!(
            "time step {h} does not fit in [0, {t_end}] around t0 = {t0}"
        )));
    }
    let n = mu0.len();
    let nf = n as f64;
    let delta = fd.particle_step;

    // Neighbour of each particle in sorted order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mu0.as_slice()[a].total_cmp(&mu0.as_slice()[b]));
    let pairs: Vec<(usize, usize)> = if fd.diagonal_correction && n > 1 {
        (0..n - 1).map(|k| (order[k], order[k + 1])).collect()
    } else {
        Vec::new()
    };
    // Pair used by each particle: the one with its right neighbour, or the
    // left one for the rightmost particle.
    let mut pair_of = vec![None; n];
    if !pairs.is_empty() {
        for (k, &j) in order.iter().enumerate() {
            pair_of[j] = Some(k.min(n - 2));
        }
    }

    let mut mus = vec![mu0.clone()];
    for j in 0..n {
        mus.push(shifted(mu0, &[(j, delta)])?);
        mus.push(shifted(mu0, &[(j, -delta)])?);
    }
    for &(a, b) in &pairs {
        mus.push(shifted(mu0, &[(a, delta), (b, delta)])?);
        mus.push(shifted(mu0, &[(a, -delta), (b, -delta)])?);
    }
    let s = field.slices(t0, &mus)?;
    let sign = if forward { 1.0 } else { -1.0 };
    let s1 = field.slices(t0 + sign * h, std::slice::from_ref(mu0))?.remove(0);
    let s2 = field.slices(t0 + sign * 2.0 * h, std::slice::from_ref(mu0))?.remove(0);
    let solves = mus.len() + 2;

    let base = &s[0];
    let hx = fd.x_step;
    let p: Vec<f64> = mu0.as_slice().iter().map(|&y| base.gradient(y, hx)).collect();
    let rho = crate::measures::JointEnsemble::new(1, mu0.as_slice().to_vec(), p.clone())?;
    let frozen = rh.freeze(&rho, None)?;
    let mut dp = vec![0.0; n];
    let mut a = 0.0;
    for j in 0..n {
        dp[j] = frozen.eval_1d(mu0.as_slice()[j], p[j], &mut a)?.1;
    }

    let mut points = Vec::with_capacity(xs.len());
    for &x in xs {
        let v0 = base.eval(x);
        let dt_v = sign * (-3.0 * v0 + 4.0 * s1.eval(x) - s2.eval(x)) / (2.0 * h);
        let dx_v = base.gradient(x, hx);
        let dxx_v = base.hessian(x, hx);
        let (hamiltonian, _) = frozen.eval_1d(x, dx_v, &mut a)?;
        let plus = |j: usize| s[1 + 2 * j].eval(x);
        let minus = |j: usize| s[2 + 2 * j].eval(x);
        let second = |j: usize| (plus(j) - 2.0 * v0 + minus(j)) / (delta * delta);
        let mut m_term = 0.0;
        for j in 0..n {
            let d_mu = nf * (plus(j) - minus(j)) / (2.0 * delta);
            let mut d_xmu = nf * second(j);
            if let Some(k) = pair_of[j] {
                let (a, b) = pairs[k];
                let (pp, mm) = (s[1 + 2 * n + 2 * k].eval(x), s[2 + 2 * n + 2 * k].eval(x));
                let mixed = 0.5 * ((pp - 2.0 * v0 + mm) / (delta * delta) - second(a) - second(b));
                d_xmu -= nf * mixed;
            }
            m_term += 0.5 * d_xmu + d_mu * dp[j];
        }
        m_term /= nf;
        let residual = dt_v + 0.5 * dxx_v + hamiltonian + m_term;
        points.push(ResidualPoint {
            x,
            dt_v,
            dx_v,
            dxx_v,
            hamiltonian,
            measure_term: m_term,
            residual: ensure_finite(residual, "master residual")?,
        });
    }
    let max_abs = points.iter().fold(0.0f64, |m, p| m.max(p.residual.abs()));
    Ok(MasterResidual {
        t0,
        particles: n,
        fd: *fd,
        points,
        max_abs,
        solves,
    })
}

/// `d_x d_mu V(t0, x, mu0, x~_i)` estimates.
#[derive(Debug, Clone, serde::Serialize)]
pub struct XmuReport {
    pub t0: f64,
    pub particles: Vec<usize>,
    pub xs: Vec<f64>,
    /// `entries[k][l]` for particle `particles[k]` at `xs[l]`.
    pub entries: Vec<Vec<f64>>,
    pub max_abs: f64,
}

/// `N` times the central difference of `d_x V(t0, x, .)` under a shift of
/// particle `i`.
pub fn xmu_derivative_fd(
    field: &dyn ValueField,
    rh: &ReducedHamiltonian,
    t0: f64,
    mu0: &ParticleEnsemble,
    particles: &[usize],
    xs: &[f64],
    fd: &FdConfig,
) -> Result<XmuReport> {
    check_stencil_ensemble(rh, mu0)?;
    fd.validate()?;
    let n = mu0.len();
    if let Some(&i) = particles.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("particle index {i} out of range for {n} particles")));
    }
    let delta = fd.particle_step;
    let mut mus = vec![mu0.clone()];
    for &i in particles {
        mus.push(shifted(mu0, &[(i, delta)])?);
        mus.push(shifted(mu0, &[(i, -delta)])?);
    }
    let s = field.slices(t0, &mus)?;
    let entries: Vec<Vec<f64>> = (0..particles.len())
        .map(|k| {
            xs.iter()
                .map(|&x| {
                    let gp = s[1 + 2 * k].gradient(x, fd.x_step);
                    let gm = s[2 + 2 * k].gradient(x, fd.x_step);
                    n as f64 * (gp - gm) / (2.0 * delta)
                })
                .collect()
        })
        .collect();
    let max_abs = entries.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure_finite(max_abs, "d_x d_mu V estimate")?;
    Ok(XmuReport {
        t0,
        particles: particles.to_vec(),
        xs: xs.to_vec(),
        entries,
        max_abs,
    })
}

/// One measure pair of a Lipschitz scan.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PairRatio {
    pub pair: usize,
    pub distance: f64,
    pub sup_gradient_gap: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LipschitzReport {
    pub order: u32,
    pub t0: f64,
    pub ratios: Vec<PairRatio>,
    /// Pairs closer than [`MIN_PAIR_DISTANCE`].
    pub skipped: Vec<usize>,
    pub max_ratio: Option<f64>,
    pub median_ratio: Option<f64>,
}

/// `sup_x |d_x V(t0, x, mu1) - d_x V(t0, x, mu2)| / W(mu1, mu2)` per pair,
/// the sup taken over the interior grid nodes. Both measures of a pair share
/// the grid and the kernel bandwidth of `mu1`.
pub fn lipschitz_estimate(
    solver: &ValueSolver,
    order: Order,
    pairs: &[(ParticleEnsemble, ParticleEnsemble)],
    t0: f64,
) -> Result<LipschitzReport> {
    let beta = solver.rh.model().meta().beta;
    if beta != 0.0 {
        return Err(Error::CommonNoiseUnsupported(beta));
    }
    let results: Vec<Option<PairRatio>> = pairs
        .par_iter()
        .enumerate()
        .map(|(k, (a, b))| {
            check_scalar(a)?;
            check_scalar(b)?;
            let w = wasserstein(order, a, b)?;
            if w < MIN_PAIR_DISTANCE {
                return Ok(None);
            }
            let bw = solver.bandwidth_for(a);
            let space = Space::covering(&[a, b], bw, solver.cfg.nx)?;
            let field = GridField {
                solver,
                space,
                bandwidth: bw,
            };
            let flows = field.flows(t0, &[a.clone(), b.clone()])?;
            let (lo, hi) = space.interior();
            let grid = flows[0].grid;
            let sup = grid
                .nodes_within(lo, hi)
                .map(|i| (flows[0].du[0][i] - flows[1].du[0][i]).abs())
                .fold(0.0f64, f64::max);
            Ok(Some(PairRatio {
                pair: k,
                distance: w,
                sup_gradient_gap: sup,
                ratio: ensure_finite(sup / w, "Lipschitz ratio")?,
            }))
        })
        .collect::<Result<_>>()?;
    let skipped = results.iter().enumerate().filter(|(_, r)| r.is_none()).map(|(k, _)| k).collect();
    let ratios: Vec<PairRatio> = results.into_iter().flatten().collect();
    let mut sorted: Vec<f64> = ratios.iter().map(|r| r.ratio).collect();
    sorted.sort_by(f64::total_cmp);
    let median_ratio = match sorted.len() {
        0 => None,
        m if m % 2 == 1 => Some(sorted[m / 2]),
        m => Some(0.5 * (sorted[m / 2 - 1] + sorted[m / 2])),
    };
    Ok(LipschitzReport {
        order: match order {
            Order::W1 => 1,
            Order::W2 => 2,
        },
        t0,
        max_ratio: sorted.last().copied(),
        median_ratio,
        ratios,
        skipped,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SemigroupReport {
    pub t0: f64,
    pub t1: f64,
    pub points: Vec<f64>,
    pub direct: Vec<f64>,
    pub two_stage: Vec<f64>,
    pub discrepancy: f64,
}

/// Report plus the two flows, for callers that budget against an oracle.
#[derive(Debug, Clone)]
pub struct SemigroupOutcome {
    pub report: SemigroupReport,
    pub direct: FlowSolution,
    pub second_stage: FlowSolution,
}

/// Compare `u(t1, .)` of the direct solve on `[t0, T]` with the solve on
/// `[t1, T]` restarted from the flowed law `mu_t1`. `t1` must be a time node
/// of the direct grid. The comparison points default to the interior nodes.
pub fn semigroup_check(
    solver: &ValueSolver,
    mu0: &DensityGrid1d,
    t0: f64,
    t1: f64,
    points: Option<&[f64]>,
) -> Result<SemigroupOutcome> {
    if !(t0 <= t1 && t1 <= solver.cfg.t_end) {
        return Err(Error::InvalidArgument(format!(
            "semigroup check needs t0 <= t1 <= T (got {t0}, {t1}, {})",
            solver.cfg.t_end
        )));
    }
    let direct = solver.solve(mu0, t0, None)?;
    let grid = direct.grid;
    let n1 = if grid.steps() == 0 {
        0
    } else {
        ((t1 - t0) / grid.dt()).round() as usize
    };
    if (grid.t(n1) - t1).abs() > 1e-9 * t1.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "t1 = {t1} is not a node of the time grid (nearest {})",
            grid.t(n1)
        )));
    }
    let second_grid = grid.restarted_at(grid.t(n1))?;
    let second_stage = equilibrium_picard(&solver.rh, &direct.mu[n1], &second_grid, &solver.cfg.solver, None)?;
    let pts: Vec<f64> = match points {
        Some(p) => p.to_vec(),
        None => {
            let (lo, hi) = Space::of_density(mu0).interior();
            grid.nodes_within(lo, hi).map(|i| grid.x(i)).collect()
        }
    };
    let d: Vec<f64> = pts.iter().map(|&x| interp(&grid, &direct.u[n1], x)).collect();
    let s: Vec<f64> = pts.iter().map(|&x| interp(&second_grid, &second_stage.u[0], x)).collect();
    let discrepancy = d.iter().zip(&s).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(SemigroupOutcome {
        report: SemigroupReport {
            t0,
            t1: grid.t(n1),
            points: pts,
            direct: d,
            two_stage: s,
            discrepancy: ensure_finite(discrepancy, "semigroup discrepancy")?,
        },
        direct,
        second_stage,
    })
}

/// Monotonicity notion propagated along the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PropagationKind {
    #[serde(rename = "LL")]
    LasryLions,
    #[serde(rename = "disp")]
    Displacement,
}

impl PropagationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PropagationKind::LasryLions => "LL",
            PropagationKind::Displacement => "disp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ll" => Ok(PropagationKind::LasryLions),
            "disp" => Ok(PropagationKind::Displacement),
            _ => Err(Error::InvalidArgument(format!("unknown propagation kind {s:?}; expected LL or disp"))),
        }
    }

    /// Data-level conditions checked before any flow is solved.
    pub fn data_checks(self) -> [GapKind; 2] {
        match self {
            PropagationKind::LasryLions => [GapKind::LlU, GapKind::LlHIntegral],
            PropagationKind::Displacement => [GapKind::DispU, GapKind::DispHIntegral],
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationConfig {
    pub checkpoints: usize,
    pub tolerance: f64,
    /// Quantile levels of the monotone rearrangement (displacement gaps).
    pub quantiles: usize,
    pub precheck_trials: usize,
    pub precheck_tolerance: f64,
    pub sampler: SamplerConfig,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            checkpoints: 9,
            tolerance: 1e-6,
            quantiles: 1000,
            precheck_trials: 200,
            precheck_tolerance: 1e-9,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PropagationReport {
    pub kind: PropagationKind,
    pub checkpoints: Vec<f64>,
    /// Minimum over pairs at each checkpoint.
    pub gaps: Vec<f64>,
    pub min_gap: f64,
    pub argmin_pair: usize,
    pub argmin_checkpoint: usize,
    pub pairs: usize,
    pub tolerance: f64,
    pub prechecks: Vec<MonotonicityReport>,
    pub pass: bool,
}

fn trapezoid_product(a: &[f64], b: &[f64], dx: f64) -> f64 {
    let n = a.len();
    let inner: f64 = (1..n - 1).map(|i| a[i] * b[i]).sum();
    dx * (inner + 0.5 * (a[0] * b[0] + a[n - 1] * b[n - 1]))
}

fn pair_gap(kind: PropagationKind, fa: &FlowSolution, fb: &FlowSolution, n: usize, lambda: f64, quantiles: usize) -> Result<f64> {
    let grid = fa.grid;
    match kind {
        PropagationKind::LasryLions => {
            // int (u^a - u^b) d(mu^a - mu^b)
            let du: Vec<f64> = fa.u[n].iter().zip(&fb.u[n]).map(|(a, b)| a - b).collect();
            let dm: Vec<f64> = fa.mu[n].values().iter().zip(fb.mu[n].values()).map(|(a, b)| a - b).collect();
            ensure_finite(trapezoid_product(&du, &dm, grid.dx()), "Lasry-Lions gap")
        }
        PropagationKind::Displacement => {
            let xa = fa.mu[n].quantile_projection(quantiles)?.into_vec();
            let xb = fb.mu[n].quantile_projection(quantiles)?.into_vec();
            let ga: Vec<f64> = xa.iter().map(|&x| interp(&grid, &fa.du[n], x)).collect();
            let gb: Vec<f64> = xb.iter().map(|&x| interp(&grid, &fb.du[n], x)).collect();
            disp_gap_cross(&ga, &gb, &xa, &xb, 1, lambda)
        }
    }
}

/// Monotonicity of `V(t, ., .)` along solved flows (grid method).
///
/// The data-level conditions are verified first; a fixture that fails them
/// is rejected. Each pair of initial densities (on a common grid) is solved
/// on `[t0, T]`, and at each of `checkpoints` equispaced times the gap of
/// `U = V(t, ., .)` is evaluated on `(mu_t^1, mu_t^2)`: the Lasry-Lions gap
/// by quadrature, the displacement gap under the monotone rearrangement.
pub fn propagation_check(
    solver: &ValueSolver,
    kind: PropagationKind,
    pairs: &[(DensityGrid1d, DensityGrid1d)],
    t0: f64,
    cfg: &PropagationConfig,
) -> Result<PropagationReport> {
    let rh = &solver.rh;
    let beta = rh.model().meta().beta;
    if beta != 0.0 {
        return Err(Error::CommonNoiseUnsupported(beta));
    }
    if pairs.is_empty() || cfg.checkpoints < 2 || cfg.quantiles == 0 {
        return Err(Error::InvalidArgument(
            "propagation needs at least one pair, two checkpoints and one quantile".into(),
        ));
    }
    let mut prechecks = Vec::new();
    for gk in kind.data_checks() {
        let r = monotonicity::check(rh, gk, &cfg.sampler, cfg.precheck_trials.max(1), cfg.precheck_tolerance)?;
        if !r.pass {
            return Err(Error::InvalidArgument(format!(
                "model {} fails the data-level {} check (min gap {:e}); propagation is not applicable",
                r.model,
                gk.as_str(),
                r.min_gap
            )));
        }
        prechecks.push(r);
    }
    let first = &pairs[0].0;
    for (a, b) in pairs {
        if !a.same_grid(first) || !b.same_grid(first) {
            return Err(Error::GridMismatch);
        }
    }
    let lambda = rh.model().meta().lambda;
    let flows: Vec<(FlowSolution, Option<FlowSolution>)> = pairs
        .par_iter()
        .map(|(a, b)| {
            let fa = solver.solve(a, t0, None)?;
            let fb = if a.values() == b.values() { None } else { Some(solver.solve(b, t0, Some(&fa))?) };
            Ok((fa, fb))
        })
        .collect::<Result<_>>()?;
    let steps = flows[0].0.grid.steps();
    let k = cfg.checkpoints;
    let idx: Vec<usize> = (0..k).map(|c| ((c * steps) as f64 / (k - 1) as f64).round() as usize).collect();
    let checkpoints = idx.iter().map(|&n| flows[0].0.grid.t(n)).collect();
    let mut gaps = vec![f64::INFINITY; k];
    let (mut min_gap, mut argmin_pair, mut argmin_checkpoint) = (f64::INFINITY, 0, 0);
    for (p, (fa, fb)) in flows.iter().enumerate() {
        for (c, &n) in idx.iter().enumerate() {
            let g = pair_gap(kind, fa, fb.as_ref().unwrap_or(fa), n, lambda, cfg.quantiles)?;
            gaps[c] = gaps[c].min(g);
            if g < min_gap {
                (min_gap, argmin_pair, argmin_checkpoint) = (g, p, c);
            }
        }
    }
    Ok(PropagationReport {
        kind,
        checkpoints,
        gaps,
        min_gap,
        argmin_pair,
        argmin_checkpoint,
        pairs: pairs.len(),
        tolerance: cfg.tolerance,
        prechecks,
        pass: min_gap >= -cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LqModel;

    fn ensemble(n: usize, seed: u64) -> ParticleEnsemble {
        use rand_distr::{Distribution, StandardNormal};
        let mut g = crate::rng::stream(seed, 0);
        ParticleEnsemble::from_scalars((0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut g); 0.3 + z }).collect()).unwrap()
    }

    #[test]
    fn oracle_field_has_a_small_residual() {
        let lq = LqModel::coupled();
        let rh = ReducedHamiltonian::new(Arc::new(lq));
        let field = OracleField {
            oracle: RiccatiOracle::new(lq, 0.0, 1.0).unwrap(),
        };
        let mu = ensemble(8, 3);
        let r = master_residual(&field, &rh, 0.5, &[-1.0, 0.2, 1.5], &mu, &FdConfig::default()).unwrap();
        assert!(r.max_abs < 1e-4, "{r:?}");
        // Near T the stencil turns backward.
        let r = master_residual(&field, &rh, 1.0, &[0.4], &mu, &FdConfig::default()).unwrap();
        assert!(r.max_abs < 1e-4, "{r:?}");
    }

    #[test]
    fn oracle_xmu_derivative_is_b() {
        let lq = LqModel::coupled();
        let rh = ReducedHamiltonian::new(Arc::new(lq));
        let o = RiccatiOracle::new(lq, 0.0, 1.0).unwrap();
        let b = o.b(0.2);
        let field = OracleField { oracle: o };
        let mu = ensemble(16, 5);
        let r = xmu_derivative_fd(&field, &rh, 0.2, &mu, &[0, 7], &[-0.5, 1.0], &FdConfig::default()).unwrap();
        for v in r.entries.iter().flatten() {
            assert!((v - b).abs() < 1e-6, "{v} vs {b}");
        }
    }

    #[test]
    fn stencils_reject_bad_inputs() {
        let lq = LqModel::coupled();
        let rh = ReducedHamiltonian::new(Arc::new(lq));
        let field = OracleField {
            oracle: RiccatiOracle::new(lq, 0.0, 1.0).unwrap(),
        };
        let mu = ensemble(65, 1);
        assert!(matches!(
            master_residual(&field, &rh, 0.0, &[0.0], &mu, &FdConfig::default()),
            Err(Error::TooLarge { .. })
        ));
        let fd = FdConfig {
            particle_step: 0.0,
            ..FdConfig::default()
        };
        assert!(matches!(
            master_residual(&field, &rh, 0.0, &[0.0], &ensemble(4, 1), &fd),
            Err(Error::StepUnderflow(_))
        ));
    }

    #[test]
    fn kernel_density_keeps_the_mean() {
        let mu = ensemble(10, 2);
        let h = silverman_bandwidth(&mu);
        let space = Space::covering(&[&mu], h, 200).unwrap();
        let d = kernel_density(&mu, h, &space).unwrap();
        assert!((d.mean() - mu.mean()[0]).abs() < 1e-10);
        assert!((d.variance() - mu.variance()[0] - h * h).abs() < 1e-8);
    }
}
