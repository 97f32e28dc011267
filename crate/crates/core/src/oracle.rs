//! Riccati oracle for the linear-quadratic family.
//!
//! The master field is `V(t, x, mu) = A x^2/2 + B x m + c0 + C m^2/2` with
//! `m` the mean of `mu`, where
//!
//! ```text
//! A' = A^2 - q                                   A(T) = g
//! B' = (1 - kappa)(2AB + B^2) - kappa A^2 - r    B(T) = s
//! c0' = -A/2                                     c0(T) = 0
//! C' = 2(1 - kappa)(A + B) C + K^2               C(T) = 0,   K = (1 - kappa)B - kappa A
//! ```
//!
//! and along the equilibrium flow `m' = -(1 - kappa)(A + B) m`,
//! `Var' = -2 A Var + 1`. Everything is integrated by RK4 at a fine step and
//! read back through cubic Hermite interpolation.

use crate::error::{Error, Result};
use crate::models::LqModel;

/// Default oracle step.
pub const ORACLE_DT: f64 = 1e-5;

#[derive(Debug, Clone)]
struct Dense<const N: usize> {
    t0: f64,
    dt: f64,
    y: Vec<[f64; N]>,
    dy: Vec<[f64; N]>,
}

impl<const N: usize> Dense<N> {
    fn eval(&self, t: f64) -> [f64; N] {
        let n = self.y.len();
        if n == 1 {
            return self.y[0];
        }
        let s = ((t - self.t0) / self.dt).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        let u = s - i as f64;
        let h = self.dt;
        let (h00, h10, h01, h11) = (
            2.0 * u.powi(3) - 3.0 * u * u + 1.0,
            u.powi(3) - 2.0 * u * u + u,
            -2.0 * u.powi(3) + 3.0 * u * u,
            u.powi(3) - u * u,
        );
        let mut out = [0.0; N];
        for k in 0..N {
            out[k] = h00 * self.y[i][k]
                + h10 * h * self.dy[i][k]
                + h01 * self.y[i + 1][k]
                + h11 * h * self.dy[i + 1][k];
        }
        out
    }
}

fn rk4<const N: usize>(
    f: impl Fn(f64, &[f64; N]) -> [f64; N],
    t_start: f64,
    y0: [f64; N],
    h: f64,
    steps: usize,
) -> (Vec<[f64; N]>, Vec<[f64; N]>) {
    let mut ys = Vec::with_capacity(steps + 1);
    let mut dys = Vec::with_capacity(steps + 1);
    let mut y = y0;
    let mut t = t_start;
    let axpy = |y: &[f64; N], k: &[f64; N], c: f64| {
        let mut o = *y;
        for i in 0..N {
            o[i] += c * k[i];
        }
        o
    };
    for n in 0..=steps {
        let k1 = f(t, &y);
        ys.push(y);
        dys.push(k1);
        if n == steps {
            break;
        }
        let k2 = f(t + 0.5 * h, &axpy(&y, &k1, 0.5 * h));
        let k3 = f(t + 0.5 * h, &axpy(&y, &k2, 0.5 * h));
        let k4 = f(t + h, &axpy(&y, &k3, h));
        for i in 0..N {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t = t_start + (n + 1) as f64 * h;
    }
    (ys, dys)
}

/// Riccati coefficients on `[t0, T]`.
#[derive(Debug, Clone)]
pub struct RiccatiOracle {
    lq: LqModel,
    t0: f64,
    t_end: f64,
    coef: Dense<4>,
}

impl RiccatiOracle {
    pub fn new(lq: LqModel, t0: f64, t_end: f64) -> Result<Self> {
        Self::with_step(lq, t0, t_end, ORACLE_DT)
    }

    pub fn with_step(lq: LqModel, t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end >= t0) || !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "oracle needs t0 <= T and dt > 0 (t0 = {t0}, T = {t_end}, dt = {dt})"
            )));
        }
        let steps = ((t_end - t0) / dt).ceil().max(0.0) as usize;
        let h = if steps == 0 { 0.0 } else { (t_end - t0) / steps as f64 };
        let kappa = lq.kappa();
        // Integrate in reversed time tau = T - t, so d/dtau = -d/dt.
        let rhs = |_tau: f64, y: &[f64; 4]| {
            let (a, b, _c0, c) = (y[0], y[1], y[2], y[3]);
            let kk = (1.0 - kappa) * b - kappa * a;
            let da = a * a - lq.q;
            let db = (1.0 - kappa) * (2.0 * a * b + b * b) - kappa * a * a - lq.r;
            let dc0 = -0.5 * a;
            let dc = 2.0 * (1.0 - kappa) * (a + b) * c + kk * kk;
            [-da, -db, -dc0, -dc]
        };
        let (ys, dys) = rk4(rhs, 0.0, [lq.g, lq.s, 0.0, 0.0], h, steps);
        if ys.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: steps });
        }
        // Reorder to forward time; derivatives flip sign.
        let y: Vec<[f64; 4]> = ys.into_iter().rev().collect();
        let dy: Vec<[f64; 4]> = dys
            .into_iter()
            .rev()
            .map(|d| [-d[0], -d[1], -d[2], -d[3]])
            .collect();
        Ok(Self {
            lq,
            t0,
            t_end,
            coef: Dense {
                t0,
                dt: if h > 0.0 { h } else { 1.0 },
                y,
                dy,
            },
        })
    }

    pub fn model(&self) -> &LqModel {
        &self.lq
    }

    pub fn horizon(&self) -> (f64, f64) {
        (self.t0, self.t_end)
    }

    /// `(A, B, c0, C)` at `t`.
    pub fn coefficients(&self, t: f64) -> [f64; 4] {
        self.coef.eval(t)
    }

    pub fn a(&self, t: f64) -> f64 {
        self.coefficients(t)[0]
    }

    pub fn b(&self, t: f64) -> f64 {
        self.coefficients(t)[1]
    }

    /// `sup_t |B(t)|` over the fine grid.
    pub fn sup_abs_b(&self) -> f64 {
        self.coef.y.iter().fold(0.0f64, |m, y| m.max(y[1].abs()))
    }

    /// `V(t, x, mu)` for a law with mean `m`.
    pub fn value(&self, t: f64, x: f64, m: f64) -> f64 {
        let [a, b, c0, c] = self.coefficients(t);
        0.5 * a * x * x + b * x * m + c0 + 0.5 * c * m * m
    }

    /// `d_x V = A x + B m`.
    pub fn dx_value(&self, t: f64, x: f64, m: f64) -> f64 {
        let [a, b, _, _] = self.coefficients(t);
        a * x + b * m
    }

    /// `d_t V` from the Riccati right-hand sides.
    pub fn dt_value(&self, t: f64, x: f64, m: f64) -> f64 {
        let [a, b, _, c] = self.coefficients(t);
        let kappa = self.lq.kappa();
        let kk = (1.0 - kappa) * b - kappa * a;
        let da = a * a - self.lq.q;
        let db = (1.0 - kappa) * (2.0 * a * b + b * b) - kappa * a * a - self.lq.r;
        let dc = 2.0 * (1.0 - kappa) * (a + b) * c + kk * kk;
        0.5 * da * x * x + db * x * m - 0.5 * a + 0.5 * dc * m * m
    }

    /// Mean and variance of the equilibrium state law started at
    /// `(mean0, var0)` at `t0`.
    pub fn moments(&self, mean0: f64, var0: f64) -> MomentFlow {
        let kappa = self.lq.kappa();
        let n = self.coef.y.len();
        let h = self.coef.dt;
        let coef = &self.coef;
        // Stages need A, B at half steps: read them from the dense output.
        let rhs = |t: f64, y: &[f64; 2]| {
            let c = coef.eval(t);
            [
                -(1.0 - kappa) * (c[0] + c[1]) * y[0],
                -2.0 * c[0] * y[1] + 1.0,
            ]
        };
        let (y, dy) = rk4(rhs, self.t0, [mean0, var0], if n > 1 { h } else { 0.0 }, n - 1);
        MomentFlow {
            flow: Dense {
                t0: self.t0,
                dt: h,
                y,
                dy,
            },
        }
    }

    /// Equilibrium feedback `alpha*(t, x) = -(A x + K m_t)` with
    /// `K = (1 - kappa) B - kappa A`, as `(slope, intercept)`.
    pub fn feedback(&self, t: f64, m: f64) -> (f64, f64) {
        let [a, b, _, _] = self.coefficients(t);
        let kappa = self.lq.kappa();
        let kk = (1.0 - kappa) * b - kappa * a;
        (-a, -kk * m)
    }
}

/// Mean/variance flow of the equilibrium.
#[derive(Debug, Clone)]
pub struct MomentFlow {
    flow: Dense<2>,
}

impl MomentFlow {
    pub fn mean(&self, t: f64) -> f64 {
        self.flow.eval(t)[0]
    }

    pub fn variance(&self, t: f64) -> f64 {
        self.flow.eval(t)[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncoupled_a_is_constant_when_g_is_root_q() {
        let o = RiccatiOracle::new(LqModel::uncoupled(), 0.0, 1.0).unwrap();
        for &t in &[0.0, 0.3, 1.0] {
            assert!((o.a(t) - 1.0).abs() < 1e-13);
            assert!(o.b(t).abs() < 1e-13);
        }
        // c0(t) = (T - t)/2 when A = 1.
        assert!((o.coefficients(0.0)[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn a_matches_tanh_solution() {
        // A' = A^2 - 1, A(T) = 0  =>  A(t) = tanh(T - t).
        let lq = LqModel {
            g: 0.0,
            ..LqModel::uncoupled()
        };
        let o = RiccatiOracle::new(lq, 0.0, 1.0).unwrap();
        for &t in &[0.0, 0.123_456, 0.5, 0.99] {
            assert!((o.a(t) - (1.0 - t).tanh()).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn moments_follow_closed_form_when_a_is_one() {
        // Var' = -2 Var + 1  =>  Var(t) = 1/2 + (Var0 - 1/2) e^{-2t}.
        let o = RiccatiOracle::new(LqModel::uncoupled(), 0.0, 1.0).unwrap();
        let mf = o.moments(0.7, 2.0);
        for &t in &[0.0f64, 0.25, 1.0] {
            let v = 0.5 + 1.5 * (-2.0 * t).exp();
            assert!((mf.variance(t) - v).abs() < 1e-11);
            assert!((mf.mean(t) - 0.7 * (-t).exp()).abs() < 1e-11);
        }
    }

    #[test]
    fn master_equation_holds_along_the_flow() {
        // u(t, x) = V(t, x, m_t) solves u_t + u_xx/2 + H^(x, u_x, rho_t) = 0.
        let lq = LqModel::coupled();
        let o = RiccatiOracle::new(lq, 0.0, 1.0).unwrap();
        let mf = o.moments(0.4, 1.0);
        let kappa = lq.kappa();
        for &t in &[0.1, 0.5, 0.9] {
            let m = mf.mean(t);
            let h = 1e-4;
            let [a, b, _, _] = o.coefficients(t);
            for &x in &[-1.0, 0.3, 2.0] {
                let ut = (o.value(t + h, x, mf.mean(t + h)) - o.value(t - h, x, mf.mean(t - h)))
                    / (2.0 * h);
                let p = a * x + b * m;
                let pbar = (a + b) * m;
                let ham = -0.5 * (p - kappa * pbar).powi(2) + 0.5 * lq.q * x * x + lq.r * x * m;
                let res = ut + 0.5 * a + ham;
                assert!(res.abs() < 1e-7, "t = {t}, x = {x}: {res}");
            }
        }
    }
}
