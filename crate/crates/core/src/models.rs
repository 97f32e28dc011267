//! Built-in models and the name registry.
//!
//! The linear-quadratic family (d = 1) has drift `b = a` and
//!
//! ```text
//! f(x, a, nu) = a^2/2 + k a abar(nu) + q x^2/2 + r x xbar(nu)
//! G(x, mu)    = g x^2/2 + s x m(mu)
//! ```
//!
//! Its control fixed point is linear, `abar* = -pbar / (1 + k)`, so
//! `H^(x, p, rho) = -(p - kappa pbar)^2/2 + q x^2/2 + r x xbar` with
//! `kappa = k / (1 + k)`.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hamiltonian::{Lagrangian, ModelMeta};

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Linear-quadratic MFGC in one dimension.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LqModel {
    /// Control interaction `k a abar`.
    pub k: f64,
    /// State cost `q x^2 / 2`.
    pub q: f64,
    /// State interaction `r x xbar`.
    pub r: f64,
    /// Terminal cost `g x^2 / 2`.
    pub g: f64,
    /// Terminal interaction `s x m`.
    pub s: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl LqModel {
    /// The uncoupled model: no measure dependence, `q = g = 1`.
    pub fn uncoupled() -> Self {
        Self {
            k: 0.0,
            q: 1.0,
            r: 0.0,
            g: 1.0,
            s: 0.0,
            beta: 0.0,
            lambda: 0.0,
        }
    }

    /// The coupled reference fixture. `g = sqrt(q)` makes `A(t) = 1`.
    pub fn coupled() -> Self {
        Self {
            k: 0.5,
            q: 1.0,
            r: 0.2,
            g: 1.0,
            s: 0.3,
            beta: 0.0,
            lambda: 0.0,
        }
    }

    /// Lasry-Lions monotone (`s, r >= 0`, `k > -1`) but not displacement
    /// monotone (`g < 0`).
    pub fn lasry_lions_fixture() -> Self {
        Self {
            k: 0.5,
            q: 1.0,
            r: 0.2,
            g: -0.5,
            s: 0.3,
            beta: 0.0,
            lambda: 0.0,
        }
    }

    /// Displacement monotone (`g + s >= 0`, `q + r >= 0`) but not Lasry-Lions
    /// monotone (`s, r < 0`).
    pub fn displacement_fixture() -> Self {
        Self {
            k: 0.5,
            q: 1.0,
            r: -0.3,
            g: 1.0,
            s: -0.5,
            beta: 0.0,
            lambda: 0.0,
        }
    }

    /// `k / (1 + k)`.
    pub fn kappa(&self) -> f64 {
        self.k / (1.0 + self.k)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.k, self.q, self.r, self.g, self.s, self.beta, self.lambda];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("LQ parameters must be finite".into()));
        }
        if !(self.k > -1.0) {
            return Err(Error::InvalidArgument(format!(
                "control interaction k = {} must exceed -1 for a unique fixed point",
                self.k
            )));
        }
        self.meta().validate()
    }

    /// Closed-form `H^(x, p, rho)` from the momentum and state means.
    pub fn reduced_ham(&self, x: f64, p: f64, pbar: f64, xbar: f64) -> f64 {
        let psi = p - self.kappa() * pbar;
        -0.5 * psi * psi + 0.5 * self.q * x * x + self.r * x * xbar
    }

    /// Closed-form `(d_x H^, d_p H^)`.
    pub fn reduced_grad(&self, x: f64, p: f64, pbar: f64, xbar: f64) -> (f64, f64) {
        (self.q * x + self.r * xbar, -(p - self.kappa() * pbar))
    }
}

impl Lagrangian for LqModel {
    fn name(&self) -> &str {
        "lq1d"
    }

    fn dim(&self) -> usize {
        1
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta {
            beta: self.beta,
            lambda: self.lambda,
            c0: 1.0,
            c1: self.kappa().abs().max(1e-3),
        }
    }

    fn law_features(&self, states: &[f64], controls: &[f64]) -> Vec<f64> {
        vec![mean(states), mean(controls)]
    }

    fn drift(&self, _x: &[f64], a: &[f64], _f: &[f64], out: &mut [f64]) {
        out[0] = a[0];
    }

    fn running_cost(&self, x: &[f64], a: &[f64], f: &[f64]) -> f64 {
        let (x, a) = (x[0], a[0]);
        0.5 * a * a + self.k * a * f[1] + 0.5 * self.q * x * x + self.r * x * f[0]
    }

    fn h_grad_a(&self, _x: &[f64], p: &[f64], a: &[f64], f: &[f64], out: &mut [f64]) -> bool {
        out[0] = p[0] + a[0] + self.k * f[1];
        true
    }

    fn h_hess_a(&self, _x: &[f64], _p: &[f64], _a: &[f64], _f: &[f64], out: &mut [f64]) -> bool {
        out[0] = 1.0;
        true
    }

    fn h_grad_x(&self, x: &[f64], _p: &[f64], _a: &[f64], f: &[f64], out: &mut [f64]) -> bool {
        out[0] = self.q * x[0] + self.r * f[0];
        true
    }

    fn terminal_features(&self, states: &[f64]) -> Vec<f64> {
        vec![mean(states)]
    }

    fn terminal_cost(&self, x: &[f64], f: &[f64]) -> f64 {
        0.5 * self.g * x[0] * x[0] + self.s * x[0] * f[0]
    }

    fn terminal_grad(&self, x: &[f64], f: &[f64], out: &mut [f64]) {
        out[0] = self.g * x[0] + self.s * f[0];
    }

    fn terminal_hess(&self, _x: &[f64], _f: &[f64], out: &mut [f64]) {
        out[0] = self.g;
    }

    fn terminal_cross(&self, _x: &[f64], _y: &[f64], _f: &[f64], out: &mut [f64]) -> bool {
        out[0] = self.s;
        true
    }
}

/// LQ model with a quartic state cost `eta x^4 / 12` and no analytic
/// derivative callbacks, so every derivative goes through the generic
/// minimizer and finite differences. `d_x H^ = q x + eta x^3 / 3 + r xbar`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnharmonicModel {
    pub base: LqModel,
    pub eta: f64,
}

impl AnharmonicModel {
    pub fn new(base: LqModel, eta: f64) -> Self {
        Self { base, eta }
    }
}

impl Lagrangian for AnharmonicModel {
    fn name(&self) -> &str {
        "anharmonic1d"
    }

    fn dim(&self) -> usize {
        1
    }

    fn meta(&self) -> ModelMeta {
        self.base.meta()
    }

    fn law_features(&self, states: &[f64], controls: &[f64]) -> Vec<f64> {
        self.base.law_features(states, controls)
    }

    fn drift(&self, x: &[f64], a: &[f64], f: &[f64], out: &mut [f64]) {
        self.base.drift(x, a, f, out);
    }

    fn running_cost(&self, x: &[f64], a: &[f64], f: &[f64]) -> f64 {
        self.base.running_cost(x, a, f) + self.eta * x[0].powi(4) / 12.0
    }

    fn terminal_features(&self, states: &[f64]) -> Vec<f64> {
        self.base.terminal_features(states)
    }

    fn terminal_cost(&self, x: &[f64], f: &[f64]) -> f64 {
        self.base.terminal_cost(x, f)
    }

    fn terminal_grad(&self, x: &[f64], f: &[f64], out: &mut [f64]) {
        self.base.terminal_grad(x, f, out);
    }

    fn terminal_hess(&self, x: &[f64], f: &[f64], out: &mut [f64]) {
        self.base.terminal_hess(x, f, out);
    }
}

/// Names accepted by [`build_model`].
pub const REGISTRY: &[&str] = &["lq1d", "lq1d-coupled", "lq1d-ll", "lq1d-disp", "anharmonic1d"];

fn lq_base(name: &str) -> Result<LqModel> {
    match name {
        "lq1d" | "anharmonic1d" => Ok(LqModel::uncoupled()),
        "lq1d-coupled" => Ok(LqModel::coupled()),
        "lq1d-ll" => Ok(LqModel::lasry_lions_fixture()),
        "lq1d-disp" => Ok(LqModel::displacement_fixture()),
        _ => Err(Error::InvalidArgument(format!(
            "unknown model {name:?}; registered models: {}",
            REGISTRY.join(", ")
        ))),
    }
}

/// LQ parameters of a registered model with `params` applied; `eta` is
/// returned separately (and only accepted by `anharmonic1d`).
fn parse(name: &str, params: &BTreeMap<String, f64>) -> Result<(LqModel, f64)> {
    let mut m = lq_base(name)?;
    let mut eta = 1.0;
    for (key, &v) in params {
        match key.as_str() {
            "k" => m.k = v,
            "q" => m.q = v,
            "r" => m.r = v,
            "g" => m.g = v,
            "s" => m.s = v,
            "beta" => m.beta = v,
            "lambda" => m.lambda = v,
            "eta" if name == "anharmonic1d" => eta = v,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "model {name:?} has no parameter {key:?}"
                )))
            }
        }
    }
    m.validate()?;
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument("eta must be nonnegative".into()));
    }
    Ok((m, eta))
}

/// Instantiate a registered model, overriding defaults with `params`.
///
/// LQ models accept `k, q, r, g, s, beta, lambda`; `anharmonic1d`
/// additionally accepts `eta`.
pub fn build_model(name: &str, params: &BTreeMap<String, f64>) -> Result<Arc<dyn Lagrangian>> {
    let (m, eta) = parse(name, params)?;
    if name == "anharmonic1d" {
        Ok(Arc::new(AnharmonicModel::new(m, eta)))
    } else {
        Ok(Arc::new(m))
    }
}

/// LQ parameters of a registered model, for the closed-form oracles.
pub fn lq_parameters(name: &str, params: &BTreeMap<String, f64>) -> Result<LqModel> {
    if name == "anharmonic1d" {
        return Err(Error::InvalidArgument(
            "anharmonic1d has no closed-form oracle".into(),
        ));
    }
    Ok(parse(name, params)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_rejects_unknown_names_and_keys() {
        let err = build_model("nope", &BTreeMap::new()).unwrap_err().to_string();
        assert!(err.contains("lq1d-coupled"), "{err}");
        let mut p = BTreeMap::new();
        p.insert("eta".to_string(), 1.0);
        assert!(build_model("lq1d", &p).is_err());
        assert!(build_model("anharmonic1d", &p).is_ok());
        p.clear();
        p.insert("k".to_string(), -1.5);
        assert!(build_model("lq1d", &p).is_err());
    }

    #[test]
    fn declared_constants_are_ordered() {
        for name in REGISTRY {
            let m = build_model(name, &BTreeMap::new()).unwrap();
            let meta = m.meta();
            assert!(meta.c0 > meta.c1 && meta.c1 > 0.0, "{name}");
        }
    }
}
