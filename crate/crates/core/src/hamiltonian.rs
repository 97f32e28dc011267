//! Hamiltonians built from Lagrangian data.
//!
//! A [`Lagrangian`] supplies the drift `b(x, a, nu)`, running cost
//! `f(x, a, nu)` and terminal cost `G(x, mu)`. Dependence on the joint law
//! `nu` goes through a finite vector of *law features* (for example the state
//! and control means), which keeps every callback cheap and lets a frozen law
//! be reused across many `(x, p)` evaluations.
//!
//! `H(x, p, nu) = inf_a p.b(x, a, nu) + f(x, a, nu)`, the fixed point
//! `nu* = Phi(rho)` resolves `nu = L(xi, phi(xi, eta, nu))`, and the reduced
//! Hamiltonian is `H^(x, p, rho) = H(x, p, Phi(rho))`.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_finite, Error, Result};
use crate::measures::{paired_distance, JointEnsemble, ParticleEnsemble};

/// Largest supported state dimension.
pub const MAX_DIM: usize = 3;

/// Model metadata declared by the user (never overridden by probes).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelMeta {
    /// Common-noise intensity.
    pub beta: f64,
    /// Displacement monotonicity slack.
    pub lambda: f64,
    /// Declared uniform concavity of `H^` in `p`.
    pub c0: f64,
    /// Declared bound on the cross derivative in `p` and the second marginal.
    pub c1: f64,
}

impl ModelMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(
                "beta and lambda must be nonnegative".into(),
            ));
        }
        if !(self.c0 > self.c1 && self.c1 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "declared constants need c0 > c1 > 0 (got c0 = {}, c1 = {})",
                self.c0, self.c1
            )));
        }
        Ok(())
    }

    /// `C1 = c0 - c1`.
    pub fn big_c1(&self) -> f64 {
        self.c0 - self.c1
    }
}

/// Lagrangian data of an MFGC.
///
/// The optional callbacks return `false` when not implemented; callers then
/// fall back to derivative-free minimization or finite differences.
pub trait Lagrangian: Send + Sync + Debug {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn meta(&self) -> ModelMeta;

    /// Features of the joint law `L(state, control)` used by `b` and `f`.
    fn law_features(&self, states: &[f64], controls: &[f64]) -> Vec<f64>;

    fn drift(&self, x: &[f64], a: &[f64], features: &[f64], out: &mut [f64]);

    fn running_cost(&self, x: &[f64], a: &[f64], features: &[f64]) -> f64;

    /// `d/da h(x, p, nu, a)`.
    fn h_grad_a(&self, _x: &[f64], _p: &[f64], _a: &[f64], _features: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// `d^2/da^2 h(x, p, nu, a)`, row-major `d x d`.
    fn h_hess_a(&self, _x: &[f64], _p: &[f64], _a: &[f64], _features: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// `d/dx h(x, p, nu, a)` at fixed `nu`.
    fn h_grad_x(&self, _x: &[f64], _p: &[f64], _a: &[f64], _features: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// Features of the state law used by `G`.
    fn terminal_features(&self, states: &[f64]) -> Vec<f64>;

    fn terminal_cost(&self, x: &[f64], features: &[f64]) -> f64;

    fn terminal_grad(&self, x: &[f64], features: &[f64], out: &mut [f64]);

    /// Row-major `d x d`.
    fn terminal_hess(&self, x: &[f64], features: &[f64], out: &mut [f64]);

    /// Lions derivative `d_mu d_x G(x, mu)(y)`, row-major `d x d`.
    fn terminal_cross(&self, _x: &[f64], _y: &[f64], _features: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

/// `h(x, p, nu, a) = p.b + f`.
pub fn h_value(model: &dyn Lagrangian, x: &[f64], p: &[f64], a: &[f64], features: &[f64]) -> f64 {
    let d = model.dim();
    let mut b = [0.0; MAX_DIM];
    model.drift(x, a, features, &mut b[..d]);
    let pb: f64 = p.iter().zip(&b[..d]).map(|(p, b)| p * b).sum();
    pb + model.running_cost(x, a, features)
}

/// Terminal cost `G(x, mu)` against an ensemble.
pub fn terminal_cost(model: &dyn Lagrangian, x: &[f64], mu: &ParticleEnsemble) -> f64 {
    let f = model.terminal_features(mu.as_slice());
    model.terminal_cost(x, &f)
}

/// Half-width of the golden-section bracket.
pub const A_MAX: f64 = 1e3;
const GRAD_TOL: f64 = 1e-10;
/// Smallest fixed-point tolerance honoured for models without analytic
/// control derivatives: their minimizer resolves `a*` only to
/// finite-difference noise.
pub const FD_FIXED_POINT_FLOOR: f64 = 1e-10;
const NEWTON_CAP: usize = 100;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimizer of `a -> h(x, p, nu, a)` for fixed law features.
///
/// Newton on the analytic gradient when the Hessian callback exists;
/// otherwise coordinate-wise golden section on `[-A_MAX, A_MAX]` followed by
/// a finite-difference Newton polish. `a` is the warm start on input and the
/// minimizer on output. Returns `H = h(x, p, nu, a*)`.
pub fn minimize_h(
    model: &dyn Lagrangian,
    x: &[f64],
    p: &[f64],
    features: &[f64],
    a: &mut [f64],
) -> Result<f64> {
    let d = model.dim();
    let mut g = [0.0; MAX_DIM];
    let mut hess = [0.0; MAX_DIM * MAX_DIM];
    let analytic = model.h_grad_a(x, p, a, features, &mut g[..d])
        && model.h_hess_a(x, p, a, features, &mut hess[..d * d]);
    if !analytic {
        golden_start(model, x, p, features, a);
    }
    let scale = 1.0 + inf_norm(p);
    let mut last_grad = f64::INFINITY;
    for _ in 0..NEWTON_CAP {
        if analytic {
            model.h_grad_a(x, p, a, features, &mut g[..d]);
            model.h_hess_a(x, p, a, features, &mut hess[..d * d]);
        } else {
            fd_grad_hess_a(model, x, p, features, a, &mut g[..d], &mut hess[..d * d]);
        }
        let gn = inf_norm(&g[..d]);
        last_grad = gn;
        if !gn.is_finite() {
            break;
        }
        if gn <= GRAD_TOL * (scale + inf_norm(a)) {
            if analytic {
                // One more Newton step: exact on quadratics, and it keeps a
                // warm start that is already within tolerance from stalling
                // an outer fixed-point iteration.
                let step = newton_step(&g[..d], &hess[..d * d])?;
                let mut trial = [0.0; MAX_DIM];
                let mut gt = [0.0; MAX_DIM];
                for k in 0..d {
                    trial[k] = a[k] - step[k];
                }
                model.h_grad_a(x, p, &trial[..d], features, &mut gt[..d]);
                if inf_norm(&gt[..d]) <= gn {
                    a.copy_from_slice(&trial[..d]);
                }
            }
            return ensure_finite(h_value(model, x, p, a, features), "Hamiltonian");
        }
        let step = newton_step(&g[..d], &hess[..d * d])?;
        // Backtrack on h so that non-quadratic models still descend.
        let h0 = h_value(model, x, p, a, features);
        let mut t = 1.0;
        let mut trial = [0.0; MAX_DIM];
        let mut accepted = false;
        let mut gt = [0.0; MAX_DIM];
        for _ in 0..40 {
            for k in 0..d {
                trial[k] = a[k] - t * step[k];
            }
            let h1 = h_value(model, x, p, &trial[..d], features);
            if h1 <= h0 + 1e-14 * (1.0 + h0.abs()) {
                accepted = true;
                break;
            }
            // Near the minimum the decrease of h drops below its round-off;
            // a shrinking analytic gradient is then the acceptance signal.
            if analytic {
                model.h_grad_a(x, p, &trial[..d], features, &mut gt[..d]);
                if inf_norm(&gt[..d]) < gn {
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        let moved = t * inf_norm(&step[..d]);
        if accepted {
            a.copy_from_slice(&trial[..d]);
        }
        if !accepted || moved <= 1e-15 * (1.0 + inf_norm(a)) {
            // No further progress is possible in floating point. Accept only if
            // the remaining gradient is at finite-difference noise level.
            if !analytic && gn <= 1e-7 * (scale + inf_norm(a)) {
                return ensure_finite(h_value(model, x, p, a, features), "Hamiltonian");
            }
            break;
        }
    }
    // Finite-difference Newton can wander inside the noise band without
    // stalling; the same noise-level acceptance applies.
    if !analytic && last_grad <= 1e-7 * (scale + inf_norm(a)) {
        return ensure_finite(h_value(model, x, p, a, features), "Hamiltonian");
    }
    Err(Error::MinimizerDiverged {
        iterations: NEWTON_CAP,
        gradient: last_grad,
    })
}

fn newton_step(g: &[f64], hess: &[f64]) -> Result<[f64; MAX_DIM]> {
    let d = g.len();
    let mut out = [0.0; MAX_DIM];
    if d == 1 {
        if !(hess[0] > 0.0) {
            return Err(Error::MinimizerDiverged {
                iterations: 0,
                gradient: g[0].abs(),
            });
        }
        out[0] = g[0] / hess[0];
        return Ok(out);
    }
    let h = DMatrix::from_row_slice(d, d, hess);
    let chol = h.cholesky().ok_or(Error::MinimizerDiverged {
        iterations: 0,
        gradient: inf_norm(g),
    })?;
    let s = chol.solve(&DVector::from_column_slice(g));
    out[..d].copy_from_slice(s.as_slice());
    Ok(out)
}

fn golden_start(model: &dyn Lagrangian, x: &[f64], p: &[f64], features: &[f64], a: &mut [f64]) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let d = a.len();
    let sweeps = if d == 1 { 1 } else { 20 };
    let mut trial = [0.0; MAX_DIM];
    for _ in 0..sweeps {
        let before: [f64; MAX_DIM] = {
            let mut b = [0.0; MAX_DIM];
            b[..d].copy_from_slice(a);
            b
        };
        for k in 0..d {
            trial[..d].copy_from_slice(a);
            let mut eval = |v: f64| {
                trial[k] = v;
                h_value(model, x, p, &trial[..d], features)
            };
            let (mut lo, mut hi) = (-A_MAX, A_MAX);
            let mut c = hi - INV_PHI * (hi - lo);
            let mut e = lo + INV_PHI * (hi - lo);
            let (mut fc, mut fe) = (eval(c), eval(e));
            while hi - lo > 1e-9 * (1.0 + c.abs()) {
                if fc < fe {
                    hi = e;
                    e = c;
                    fe = fc;
                    c = hi - INV_PHI * (hi - lo);
                    fc = eval(c);
                } else {
                    lo = c;
                    c = e;
                    fc = fe;
                    e = lo + INV_PHI * (hi - lo);
                    fe = eval(e);
                }
            }
            a[k] = 0.5 * (lo + hi);
        }
        let change = (0..d).fold(0.0f64, |m, k| m.max((a[k] - before[k]).abs()));
        if change < 1e-9 {
            break;
        }
    }
}

fn fd_grad_hess_a(
    model: &dyn Lagrangian,
    x: &[f64],
    p: &[f64],
    features: &[f64],
    a: &[f64],
    g: &mut [f64],
    hess: &mut [f64],
) {
    let d = a.len();
    let mut ga = [0.0; MAX_DIM];
    if model.h_grad_a(x, p, a, features, &mut ga[..d]) {
        g.copy_from_slice(&ga[..d]);
        // Hessian by central differences of the analytic gradient.
        let mut tp = [0.0; MAX_DIM];
        let mut gp = [0.0; MAX_DIM];
        let mut gm = [0.0; MAX_DIM];
        for j in 0..d {
            let e = 1e-5 * (1.0 + a[j].abs());
            tp[..d].copy_from_slice(a);
            tp[j] = a[j] + e;
            model.h_grad_a(x, p, &tp[..d], features, &mut gp[..d]);
            tp[j] = a[j] - e;
            model.h_grad_a(x, p, &tp[..d], features, &mut gm[..d]);
            for i in 0..d {
                hess[i * d + j] = (gp[i] - gm[i]) / (2.0 * e);
            }
        }
        return;
    }
    let f = |v: &[f64]| h_value(model, x, p, v, features);
    let mut t = [0.0; MAX_DIM];
    let f0 = f(a);
    for i in 0..d {
        let e = 1e-5 * (1.0 + a[i].abs());
        t[..d].copy_from_slice(a);
        t[i] = a[i] + e;
        let fp = f(&t[..d]);
        t[i] = a[i] - e;
        let fm = f(&t[..d]);
        g[i] = (fp - fm) / (2.0 * e);
        let e2 = 1e-4 * (1.0 + a[i].abs());
        t[i] = a[i] + e2;
        let fpp = f(&t[..d]);
        t[i] = a[i] - e2;
        let fmm = f(&t[..d]);
        hess[i * d + i] = (fpp - 2.0 * f0 + fmm) / (e2 * e2);
        for j in 0..i {
            let ej = 1e-4 * (1.0 + a[j].abs());
            let mut q = |si: f64, sj: f64| {
                t[..d].copy_from_slice(a);
                t[i] += si * e2;
                t[j] += sj * ej;
                f(&t[..d])
            };
            let v = (q(1.0, 1.0) - q(1.0, -1.0) - q(-1.0, 1.0) + q(-1.0, -1.0)) / (4.0 * e2 * ej);
            hess[i * d + j] = v;
            hess[j * d + i] = v;
        }
    }
}

/// `H(x, p, nu)` and the minimizing control `phi(x, p, nu)`.
pub fn hamiltonian_min(
    model: &dyn Lagrangian,
    x: &[f64],
    p: &[f64],
    nu: &JointEnsemble,
) -> Result<(f64, Vec<f64>)> {
    check_dim(model, x)?;
    check_dim(model, p)?;
    if nu.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: nu.dim(),
        });
    }
    let features = model.law_features(nu.states(), nu.seconds());
    let mut a = vec![0.0; model.dim()];
    let h = minimize_h(model, x, p, &features, &mut a)?;
    Ok((h, a))
}

fn check_dim(model: &dyn Lagrangian, v: &[f64]) -> Result<()> {
    if v.len() != model.dim() {
        Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: v.len(),
        })
    } else {
        Ok(())
    }
}

/// Settings of the damped fixed-point iteration for `Phi`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FixedPointSettings {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointSettings {
    fn default() -> Self {
        Self {
            damping: 1.0,
            tol: 1e-12,
            max_iter: 200,
        }
    }
}

/// Finite-difference steps in state, momentum and particle coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FdSteps {
    pub x: f64,
    pub p: f64,
    pub mu: f64,
}

impl Default for FdSteps {
    fn default() -> Self {
        Self {
            x: 1e-5,
            p: 1e-5,
            mu: 1e-5,
        }
    }
}

/// Result of the fixed-point iteration.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub nu: JointEnsemble,
    pub features: Vec<f64>,
    pub iterations: usize,
    /// Index-coupled distance between `nu` and its image; bounds `W_2` above.
    pub residual: f64,
}

/// `H^ = H o Phi` with its derivative evaluators.
#[derive(Debug, Clone)]
pub struct ReducedHamiltonian {
    model: Arc<dyn Lagrangian>,
    pub fixed_point: FixedPointSettings,
    pub steps: FdSteps,
}

impl ReducedHamiltonian {
    pub fn new(model: Arc<dyn Lagrangian>) -> Self {
        Self {
            model,
            fixed_point: FixedPointSettings::default(),
            steps: FdSteps::default(),
        }
    }

    pub fn with_settings(mut self, fixed_point: FixedPointSettings, steps: FdSteps) -> Result<Self> {
        if !(fixed_point.tol > 0.0) || !(fixed_point.damping > 0.0 && fixed_point.damping <= 1.0) {
            return Err(Error::InvalidArgument(
                "fixed point needs tol > 0 and damping in (0, 1]".into(),
            ));
        }
        if !(steps.x > 0.0 && steps.p > 0.0 && steps.mu > 0.0) {
            return Err(Error::StepUnderflow("finite-difference steps must be positive".into()));
        }
        self.fixed_point = fixed_point;
        self.steps = steps;
        Ok(self)
    }

    pub fn model(&self) -> &dyn Lagrangian {
        self.model.as_ref()
    }

    pub fn model_arc(&self) -> Arc<dyn Lagrangian> {
        Arc::clone(&self.model)
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// `Phi(rho)`: damped iteration `a <- theta I(a) + (1 - theta) a` on the
    /// control coordinates, from zero controls or from `warm`.
    pub fn fixed_point(&self, rho: &JointEnsemble, warm: Option<&[f64]>) -> Result<FixedPoint> {
        let model = self.model();
        let d = model.dim();
        if rho.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: rho.dim(),
            });
        }
        let n = rho.len();
        let mut controls = match warm {
            Some(w) if w.len() == n * d => w.to_vec(),
            Some(w) => {
                return Err(Error::SizeMismatch {
                    left: n,
                    right: w.len() / d,
                })
            }
            None => vec![0.0; n * d],
        };
        let mut image = controls.clone();
        let theta = self.fixed_point.damping;
        let states = rho.states();
        let seconds = rho.seconds();
        let mut residual = f64::INFINITY;
        let mut tol = self.fixed_point.tol;
        for iteration in 0..=self.fixed_point.max_iter {
            let features = model.law_features(states, &controls);
            if iteration == 0 && n > 0 {
                let mut g = [0.0; MAX_DIM];
                if !model.h_grad_a(&states[..d], &seconds[..d], &controls[..d], &features, &mut g[..d]) {
                    tol = tol.max(FD_FIXED_POINT_FLOOR);
                }
            }
            for i in 0..n {
                let r = i * d..(i + 1) * d;
                minimize_h(model, &states[r.clone()], &seconds[r.clone()], &features, &mut image[r])?;
            }
            residual = paired_distance(&image, &controls) * (d as f64).sqrt();
            if !residual.is_finite() {
                break;
            }
            if residual <= tol {
                let nu = rho.with_seconds(controls)?;
                return Ok(FixedPoint {
                    nu,
                    features,
                    iterations: iteration,
                    residual,
                });
            }
            for (c, m) in controls.iter_mut().zip(&image) {
                *c = theta * m + (1.0 - theta) * *c;
            }
        }
        Err(Error::FixedPointDiverged {
            iterations: self.fixed_point.max_iter,
            residual,
        })
    }

    /// `H^` with `Phi(rho)` resolved once.
    pub fn freeze(&self, rho: &JointEnsemble, warm: Option<&[f64]>) -> Result<FrozenHamiltonian> {
        let fp = self.fixed_point(rho, warm)?;
        Ok(FrozenHamiltonian {
            model: Arc::clone(&self.model),
            features: fp.features,
            nu: fp.nu,
            iterations: fp.iterations,
            steps: self.steps,
        })
    }

    pub fn value(&self, x: &[f64], p: &[f64], rho: &JointEnsemble) -> Result<f64> {
        self.freeze(rho, None)?.value(x, p)
    }

    /// `(d_x H^, d_p H^)`.
    pub fn grad(&self, x: &[f64], p: &[f64], rho: &JointEnsemble) -> Result<(Vec<f64>, Vec<f64>)> {
        let frozen = self.freeze(rho, None)?;
        Ok((frozen.grad_x(x, p)?, frozen.grad_p(x, p)?))
    }

    /// `d_pp H^` by central second differences with step `eps`, row-major.
    pub fn hess_p(&self, x: &[f64], p: &[f64], rho: &JointEnsemble, eps: f64) -> Result<Vec<f64>> {
        self.freeze(rho, None)?.hess_p(x, p, eps)
    }
}

/// `H^(., ., rho)` with the law `Phi(rho)` fixed.
#[derive(Debug, Clone)]
pub struct FrozenHamiltonian {
    model: Arc<dyn Lagrangian>,
    features: Vec<f64>,
    nu: JointEnsemble,
    iterations: usize,
    steps: FdSteps,
}

impl FrozenHamiltonian {
    pub fn nu(&self) -> &JointEnsemble {
        &self.nu
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Iterations the fixed point took.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn model(&self) -> &dyn Lagrangian {
        self.model.as_ref()
    }

    fn has_newton(&self, x: &[f64], p: &[f64], a: &[f64]) -> bool {
        let d = self.model.dim();
        let mut g = [0.0; MAX_DIM];
        let mut h = [0.0; MAX_DIM * MAX_DIM];
        self.model.h_grad_a(x, p, a, &self.features, &mut g[..d])
            && self.model.h_hess_a(x, p, a, &self.features, &mut h[..d * d])
    }

    /// `H^(x, p)` with warm-started control (updated in place).
    pub fn value_warm(&self, x: &[f64], p: &[f64], a: &mut [f64]) -> Result<f64> {
        minimize_h(self.model(), x, p, &self.features, a)
    }

    pub fn value(&self, x: &[f64], p: &[f64]) -> Result<f64> {
        let mut a = [0.0; MAX_DIM];
        self.value_warm(x, p, &mut a[..self.model.dim()])
    }

    /// Optimal control `phi(x, p, Phi(rho))`.
    pub fn control(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        let mut a = vec![0.0; self.model.dim()];
        self.value_warm(x, p, &mut a)?;
        Ok(a)
    }

    /// `d_p H^`: the drift at the minimizer (envelope theorem) when the
    /// minimizer is analytic, else central differences.
    pub fn grad_p(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        let d = self.model.dim();
        let mut a = vec![0.0; d];
        self.value_warm(x, p, &mut a)?;
        let mut out = vec![0.0; d];
        self.grad_p_at(x, p, &mut a, &mut out)?;
        Ok(out)
    }

    fn grad_p_at(&self, x: &[f64], p: &[f64], a: &mut [f64], out: &mut [f64]) -> Result<()> {
        let d = self.model.dim();
        if self.has_newton(x, p, a) {
            self.model.drift(x, a, &self.features, out);
            return Ok(());
        }
        let e = self.steps.p;
        let mut t = [0.0; MAX_DIM];
        let mut warm = [0.0; MAX_DIM];
        for k in 0..d {
            t[..d].copy_from_slice(p);
            warm[..d].copy_from_slice(a);
            t[k] = p[k] + e;
            let hp = self.value_warm(x, &t[..d], &mut warm[..d])?;
            warm[..d].copy_from_slice(a);
            t[k] = p[k] - e;
            let hm = self.value_warm(x, &t[..d], &mut warm[..d])?;
            out[k] = (hp - hm) / (2.0 * e);
        }
        Ok(())
    }

    /// `d_x H^`: `d_x h` at the minimizer when the callback exists, else
    /// central differences.
    pub fn grad_x(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        let d = self.model.dim();
        let mut a = vec![0.0; d];
        self.value_warm(x, p, &mut a)?;
        let mut out = vec![0.0; d];
        self.grad_x_at(x, p, &mut a, &mut out)?;
        Ok(out)
    }

    fn grad_x_at(&self, x: &[f64], p: &[f64], a: &mut [f64], out: &mut [f64]) -> Result<()> {
        let d = self.model.dim();
        if self.model.h_grad_x(x, p, a, &self.features, out) {
            return Ok(());
        }
        let e = self.steps.x;
        let mut t = [0.0; MAX_DIM];
        let mut warm = [0.0; MAX_DIM];
        for k in 0..d {
            t[..d].copy_from_slice(x);
            warm[..d].copy_from_slice(a);
            t[k] = x[k] + e;
            let hp = self.value_warm(&t[..d], p, &mut warm[..d])?;
            warm[..d].copy_from_slice(a);
            t[k] = x[k] - e;
            let hm = self.value_warm(&t[..d], p, &mut warm[..d])?;
            out[k] = (hp - hm) / (2.0 * e);
        }
        Ok(())
    }

    /// `(H^, d_p H^)` in one dimension with a warm-started control.
    pub fn eval_1d(&self, x: f64, p: f64, a: &mut f64) -> Result<(f64, f64)> {
        let mut av = [*a];
        let h = self.value_warm(&[x], &[p], &mut av)?;
        let mut dp = [0.0];
        self.grad_p_at(&[x], &[p], &mut av, &mut dp)?;
        *a = av[0];
        Ok((h, dp[0]))
    }

    /// `(d_x H^, d_p H^)` in one dimension with a warm-started control.
    pub fn grads_1d(&self, x: f64, p: f64, a: &mut f64) -> Result<(f64, f64)> {
        let mut av = [*a];
        self.value_warm(&[x], &[p], &mut av)?;
        let mut dx = [0.0];
        let mut dp = [0.0];
        self.grad_x_at(&[x], &[p], &mut av, &mut dx)?;
        self.grad_p_at(&[x], &[p], &mut av, &mut dp)?;
        *a = av[0];
        Ok((dx[0], dp[0]))
    }

    /// `d_pp H^` by central second differences, row-major.
    pub fn hess_p(&self, x: &[f64], p: &[f64], eps: f64) -> Result<Vec<f64>> {
        let d = self.model.dim();
        let mut out = vec![0.0; d * d];
        let h0 = self.value(x, p)?;
        let mut t = vec![0.0; d];
        let mut at = |dp: &[(usize, f64)]| -> Result<f64> {
            t.copy_from_slice(p);
            for &(k, s) in dp {
                t[k] += s * eps;
            }
            self.value(x, &t)
        };
        for i in 0..d {
            out[i * d + i] = (at(&[(i, 1.0)])? - 2.0 * h0 + at(&[(i, -1.0)])?) / (eps * eps);
            for j in 0..i {
                let v = (at(&[(i, 1.0), (j, 1.0)])? - at(&[(i, 1.0), (j, -1.0)])?
                    - at(&[(i, -1.0), (j, 1.0)])?
                    + at(&[(i, -1.0), (j, -1.0)])?)
                    / (4.0 * eps * eps);
                out[i * d + j] = v;
                out[j * d + i] = v;
            }
        }
        Ok(out)
    }
}

/// Which coordinate slot of a joint ensemble to perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    State,
    Second,
}

/// Difference scheme for measure derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Forward,
    Central,
}

fn shifted(rho: &JointEnsemble, i: usize, j: usize, slot: Slot, delta: f64) -> Result<JointEnsemble> {
    let d = rho.dim();
    match slot {
        Slot::State => {
            let mut s = rho.states().to_vec();
            s[i * d + j] += delta;
            rho.with_states(s)
        }
        Slot::Second => {
            let mut s = rho.seconds().to_vec();
            s[i * d + j] += delta;
            rho.with_seconds(s)
        }
    }
}

/// Empirical Lions derivative: `N (F(rho + eps e_ij) - F(rho)) / eps` (or
/// the central variant) for coordinate `j` of particle `i`.
pub fn lions_derivative_fd(
    func: impl Fn(&JointEnsemble) -> Result<f64>,
    rho: &JointEnsemble,
    i: usize,
    j: usize,
    slot: Slot,
    eps: f64,
    scheme: Scheme,
) -> Result<f64> {
    if i >= rho.len() || j >= rho.dim() {
        return Err(Error::InvalidArgument(format!(
            "particle {i}, coordinate {j} out of range"
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::StepUnderflow(format!("measure step {eps}")));
    }
    let n = rho.len() as f64;
    let fp = ensure_finite(func(&shifted(rho, i, j, slot, eps)?)?, "Lions derivative")?;
    let v = match scheme {
        Scheme::Forward => {
            let f0 = ensure_finite(func(rho)?, "Lions derivative")?;
            n * (fp - f0) / eps
        }
        Scheme::Central => {
            let fm = ensure_finite(func(&shifted(rho, i, j, slot, -eps)?)?, "Lions derivative")?;
            n * (fp - fm) / (2.0 * eps)
        }
    };
    ensure_finite(v, "Lions derivative")
}

/// Directional derivative `d/de F(L(xi + e gamma, eta + e zeta))` at `e = 0`,
/// central. It equals `E[d_rho1 F . gamma + d_rho2 F . zeta]`.
pub fn directional_lions(
    func: impl Fn(&JointEnsemble) -> Result<f64>,
    rho: &JointEnsemble,
    gamma: &[f64],
    zeta: &[f64],
    eps: f64,
) -> Result<f64> {
    if gamma.len() != rho.states().len() || zeta.len() != rho.seconds().len() {
        return Err(Error::SizeMismatch {
            left: rho.len(),
            right: gamma.len().min(zeta.len()) / rho.dim(),
        });
    }
    let moved = |s: f64| -> Result<JointEnsemble> {
        JointEnsemble::new(
            rho.dim(),
            rho.states().iter().zip(gamma).map(|(x, g)| x + s * g).collect(),
            rho.seconds().iter().zip(zeta).map(|(p, z)| p + s * z).collect(),
        )
    };
    let fp = func(&moved(eps)?)?;
    let fm = func(&moved(-eps)?)?;
    ensure_finite((fp - fm) / (2.0 * eps), "directional Lions derivative")
}

/// One probe point for [`concavity_probe`].
#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub rho: JointEnsemble,
}

/// Probed concavity constants against the declared ones.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConcavityReport {
    /// Infimum over samples of the smallest eigenvalue of `-d_pp H^`;
    /// `None` for an empty scan.
    pub c0_hat: Option<f64>,
    /// Supremum over samples and particles of `|d_p d_rho2 H^|`.
    pub c1_hat: Option<f64>,
    pub declared_c0: f64,
    pub declared_c1: f64,
    pub samples: usize,
    /// `c0_hat - c1_hat > 0`; `None` when undefined.
    pub verdict: Option<bool>,
}

impl ConcavityReport {
    pub fn big_c1_hat(&self) -> Option<f64> {
        Some(self.c0_hat? - self.c1_hat?)
    }
}

/// Step for second differences in `p`: large enough to keep round-off far
/// below the probe tolerance.
pub const HESS_STEP: f64 = 1e-4;

/// Estimate `c0` and `c1` on the given samples.
pub fn concavity_probe(rh: &ReducedHamiltonian, samples: &[ProbeSample]) -> Result<ConcavityReport> {
    let meta = rh.model().meta();
    let d = rh.dim();
    let mut c0: Option<f64> = None;
    let mut c1: Option<f64> = None;
    for s in samples {
        let hess = rh.hess_p(&s.x, &s.p, &s.rho, HESS_STEP)?;
        let neg = DMatrix::from_row_slice(d, d, &hess).map(|v| -v);
        let sym = (&neg + neg.transpose()) * 0.5;
        let lmin = sym.symmetric_eigen().eigenvalues.min();
        c0 = Some(c0.map_or(lmin, |c| c.min(lmin)));

        // d_p H^ (x, p, .) differentiated in each particle's second slot.
        for i in 0..s.rho.len() {
            let mut m = DMatrix::<f64>::zeros(d, d);
            for l in 0..d {
                let col = lions_vector(rh, &s.x, &s.p, &s.rho, i, l)?;
                for k in 0..d {
                    m[(k, l)] = col[k];
                }
            }
            let norm = if d == 1 {
                m[(0, 0)].abs()
            } else {
                m.svd(false, false).singular_values.max()
            };
            c1 = Some(c1.map_or(norm, |c| c.max(norm)));
        }
    }
    let verdict = match (c0, c1) {
        (Some(a), Some(b)) => Some(a - b > 0.0),
        _ => None,
    };
    Ok(ConcavityReport {
        c0_hat: c0,
        c1_hat: c1,
        declared_c0: meta.c0,
        declared_c1: meta.c1,
        samples: samples.len(),
        verdict,
    })
}

/// Central Lions derivative of `d_p H^(x, p, .)` along coordinate `l` of
/// particle `i`'s second slot, all components at once.
fn lions_vector(
    rh: &ReducedHamiltonian,
    x: &[f64],
    p: &[f64],
    rho: &JointEnsemble,
    i: usize,
    l: usize,
) -> Result<Vec<f64>> {
    let eps = rh.steps.mu;
    let n = rho.len() as f64;
    let base = rh.fixed_point(rho, None)?;
    let warm = base.nu.seconds().to_vec();
    let eval = |delta: f64| -> Result<Vec<f64>> {
        let r = shifted(rho, i, l, Slot::Second, delta)?;
        rh.freeze(&r, Some(&warm))?.grad_p(x, p)
    };
    let up = eval(eps)?;
    let down = eval(-eps)?;
    Ok(up
        .iter()
        .zip(&down)
        .map(|(a, b)| n * (a - b) / (2.0 * eps))
        .collect())
}
