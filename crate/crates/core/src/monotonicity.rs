//! Monotonicity gap functionals for value-type functions `U(x, mu)` and for
//! the reduced Hamiltonian, in integral and differential form.
//!
//! Couplings between two laws are index pairings of equal-size ensembles.
//! Integrals against a signed measure `mu1 - mu2` are differences of two
//! ensemble averages. Tilde expectations over an independent copy are
//! realized exactly: for an empirical law, `E~[d_rho F(x~) g~]` is the
//! directional derivative of `F` along the ensemble perturbation `g`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{ensure_finite, Error, Result};
use crate::hamiltonian::{FrozenHamiltonian, Lagrangian, ReducedHamiltonian, MAX_DIM};
use crate::measures::{pushforward, JointEnsemble, ParticleEnsemble};
use crate::rng;

/// Gap functional selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GapKind {
    #[serde(rename = "LL-U")]
    LlU,
    #[serde(rename = "disp-U")]
    DispU,
    #[serde(rename = "LL-H-integral")]
    LlHIntegral,
    #[serde(rename = "LL-H-differential")]
    LlHDifferential,
    #[serde(rename = "disp-H-integral")]
    DispHIntegral,
    #[serde(rename = "disp-H-differential")]
    DispHDifferential,
    #[serde(rename = "LL-Lagrangian")]
    LlLagrangian,
}

impl GapKind {
    pub const ALL: [GapKind; 7] = [
        GapKind::LlU,
        GapKind::DispU,
        GapKind::LlHIntegral,
        GapKind::LlHDifferential,
        GapKind::DispHIntegral,
        GapKind::DispHDifferential,
        GapKind::LlLagrangian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GapKind::LlU => "LL-U",
            GapKind::DispU => "disp-U",
            GapKind::LlHIntegral => "LL-H-integral",
            GapKind::LlHDifferential => "LL-H-differential",
            GapKind::DispHIntegral => "disp-H-integral",
            GapKind::DispHDifferential => "disp-H-differential",
            GapKind::LlLagrangian => "LL-Lagrangian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown gap kind {s:?}; expected one of {}",
                    Self::ALL.map(|k| k.as_str()).join(", ")
                ))
            })
    }
}

fn same_size(a: usize, b: usize) -> Result<()> {
    if a != b {
        Err(Error::SizeMismatch { left: a, right: b })
    } else {
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lasry-Lions gap from cross evaluations `u_ab[i] = U(xi_a[i], mu_b)`:
/// `mean(u11 + u22 - u12 - u21)`.
pub fn ll_gap_cross(u11: &[f64], u22: &[f64], u12: &[f64], u21: &[f64]) -> Result<f64> {
    let n = u11.len();
    for len in [u22.len(), u12.len(), u21.len()] {
        same_size(n, len)?;
    }
    if n == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let s: f64 = (0..n).map(|i| (u11[i] - u12[i]) + (u22[i] - u21[i])).sum();
    ensure_finite(s / n as f64, "Lasry-Lions gap")
}

/// Lasry-Lions gap of `U` for the index-paired ensembles `xi1`, `xi2`.
pub fn ll_gap_u(
    u: impl Fn(&[f64], &ParticleEnsemble) -> f64,
    xi1: &ParticleEnsemble,
    xi2: &ParticleEnsemble,
) -> Result<f64> {
    same_size(xi1.len(), xi2.len())?;
    let eval = |xi: &ParticleEnsemble, mu: &ParticleEnsemble| -> Vec<f64> {
        xi.points().map(|x| u(x, mu)).collect()
    };
    ll_gap_cross(&eval(xi1, xi1), &eval(xi2, xi2), &eval(xi1, xi2), &eval(xi2, xi1))
}

/// Displacement gap from gradients `g_a[i] = d_x U(xi_a[i], mu_a)` (flat):
/// `mean(<g1 - g2, xi1 - xi2> + lambda |xi1 - xi2|^2)`.
pub fn disp_gap_cross(g1: &[f64], g2: &[f64], xi1: &[f64], xi2: &[f64], dim: usize, lambda: f64) -> Result<f64> {
    for len in [g2.len(), xi1.len(), xi2.len()] {
        same_size(g1.len(), len)?;
    }
    if g1.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let n = g1.len() / dim;
    let mut s = 0.0;
    for k in 0..g1.len() {
        let d = xi1[k] - xi2[k];
        s += (g1[k] - g2[k]) * d + lambda * d * d;
    }
    ensure_finite(s / n as f64, "displacement gap")
}

/// Displacement lambda-gap of `U` given its state gradient `dxu`.
pub fn disp_gap_u(
    dxu: impl Fn(&[f64], &ParticleEnsemble) -> Vec<f64>,
    lambda: f64,
    xi1: &ParticleEnsemble,
    xi2: &ParticleEnsemble,
) -> Result<f64> {
    same_size(xi1.len(), xi2.len())?;
    if xi1.dim() != xi2.dim() {
        return Err(Error::DimensionMismatch {
            expected: xi1.dim(),
            found: xi2.dim(),
        });
    }
    let grads = |xi: &ParticleEnsemble| -> Vec<f64> { xi.points().flat_map(|x| dxu(x, xi)).collect() };
    disp_gap_cross(&grads(xi1), &grads(xi2), xi1.as_slice(), xi2.as_slice(), xi1.dim(), lambda)
}

/// Integral Lasry-Lions gap of `H^` with `rho_i = (id, phi(., mu_i)) # mu_i`.
pub fn ll_gap_h(
    rh: &ReducedHamiltonian,
    phi: impl Fn(&[f64], &ParticleEnsemble) -> Vec<f64>,
    mu1: &ParticleEnsemble,
    mu2: &ParticleEnsemble,
) -> Result<f64> {
    let d = rh.dim();
    let rho1 = pushforward(mu1, |x| phi(x, mu1))?;
    let rho2 = pushforward(mu2, |x| phi(x, mu2))?;
    let h1 = rh.freeze(&rho1, None)?;
    let h2 = rh.freeze(&rho2, None)?;
    // Integrand pieces evaluated at the points of `mu`; `own` selects which
    // law's gradient weights the second integral.
    let side = |mu: &ParticleEnsemble, own: &FrozenHamiltonian, own_law: &ParticleEnsemble| -> Result<(f64, f64)> {
        let (mut first, mut second) = (0.0, 0.0);
        for x in mu.points() {
            let p1 = phi(x, mu1);
            let p2 = phi(x, mu2);
            first += h1.value(x, &p1)? - h2.value(x, &p2)?;
            let p_own = phi(x, own_law);
            let dp = own.grad_p(x, &p_own)?;
            let diff: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a - b).collect();
            second += dot(&diff[..d], &dp);
        }
        let n = mu.len() as f64;
        Ok((first / n, second / n))
    };
    let (f1, s1) = side(mu1, &h1, mu1)?;
    let (f2, s2) = side(mu2, &h2, mu2)?;
    ensure_finite((f1 - f2) - (s1 - s2), "Lasry-Lions Hamiltonian gap")
}

/// Integral displacement lambda-gap of `H^` for the index-paired joint
/// ensembles `(xi1, eta1)`, `(xi2, eta2)`.
pub fn disp_gap_h(rh: &ReducedHamiltonian, r1: &JointEnsemble, r2: &JointEnsemble, lambda: f64) -> Result<f64> {
    same_size(r1.len(), r2.len())?;
    let h1 = rh.freeze(r1, None)?;
    let h2 = rh.freeze(r2, None)?;
    disp_gap_h_frozen(&h1, &h2, r1, r2, lambda)
}

fn disp_gap_h_frozen(
    h1: &FrozenHamiltonian,
    h2: &FrozenHamiltonian,
    r1: &JointEnsemble,
    r2: &JointEnsemble,
    lambda: f64,
) -> Result<f64> {
    let n = r1.len();
    let mut s = 0.0;
    for i in 0..n {
        let (x1, p1) = (r1.state(i), r1.second(i));
        let (x2, p2) = (r2.state(i), r2.second(i));
        let gx1 = h1.grad_x(x1, p1)?;
        let gx2 = h2.grad_x(x2, p2)?;
        let gp1 = h1.grad_p(x1, p1)?;
        let gp2 = h2.grad_p(x2, p2)?;
        for k in 0..r1.dim() {
            let dx = x1[k] - x2[k];
            let dp = p1[k] - p2[k];
            let gx = gx1[k] - gx2[k];
            let gp = gp1[k] - gp2[k];
            s += gx * dx - gp * dp - 2.0 * lambda * gp * dx;
        }
    }
    ensure_finite(s / n as f64, "displacement Hamiltonian gap")
}

fn shifted_joint(rho: &JointEnsemble, ds: Option<&[f64]>, dp: Option<&[f64]>, eps: f64) -> Result<JointEnsemble> {
    let states = match ds {
        Some(g) => rho.states().iter().zip(g).map(|(x, g)| x + eps * g).collect(),
        None => rho.states().to_vec(),
    };
    let seconds = match dp {
        Some(z) => rho.seconds().iter().zip(z).map(|(p, z)| p + eps * z).collect(),
        None => rho.seconds().to_vec(),
    };
    JointEnsemble::new(rho.dim(), states, seconds)
}

/// `gap(eps) / eps^2` for the integral displacement gap between `rho` moved by
/// `eps (gamma, zeta)` and `rho` itself. Tends to minus the displacement
/// differential form as `eps -> 0`.
pub fn disp_scaled_gap(
    rh: &ReducedHamiltonian,
    rho: &JointEnsemble,
    gamma: &[f64],
    zeta: &[f64],
    lambda: f64,
    eps: f64,
) -> Result<f64> {
    same_size(rho.states().len(), gamma.len())?;
    same_size(rho.states().len(), zeta.len())?;
    if !(eps > 0.0) {
        return Err(Error::StepUnderflow(format!("eps = {eps:e}")));
    }
    let moved = shifted_joint(rho, Some(gamma), Some(zeta), eps)?;
    ensure_finite(disp_gap_h(rh, &moved, rho, lambda)? / (eps * eps), "scaled displacement gap")
}

/// Directional Lions derivatives of `(d_x H^, d_p H^)` at every particle of
/// `rho`, along the ensemble perturbation `(ds, dp)`. Flat `(N d)` vectors.
fn directional_grads(
    rh: &ReducedHamiltonian,
    rho: &JointEnsemble,
    warm: &[f64],
    ds: Option<&[f64]>,
    dp: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let eps = rh.steps.mu;
    let up = rh.freeze(&shifted_joint(rho, ds, dp, eps)?, Some(warm))?;
    let down = rh.freeze(&shifted_joint(rho, ds, dp, -eps)?, Some(warm))?;
    let d = rho.dim();
    let mut dx = Vec::with_capacity(rho.len() * d);
    let mut dpv = Vec::with_capacity(rho.len() * d);
    for i in 0..rho.len() {
        let (x, p) = (rho.state(i), rho.second(i));
        let (ux, dxm) = (up.grad_x(x, p)?, down.grad_x(x, p)?);
        let (up_p, dn_p) = (up.grad_p(x, p)?, down.grad_p(x, p)?);
        for k in 0..d {
            dx.push((ux[k] - dxm[k]) / (2.0 * eps));
            dpv.push((up_p[k] - dn_p[k]) / (2.0 * eps));
        }
    }
    Ok((dx, dpv))
}

/// `<v, M w>` where `M` is the Jacobian of `grad` (one of the frozen
/// gradients) in the `state` or `second` argument, by a central directional
/// difference along `w`.
fn bilinear(
    h: &FrozenHamiltonian,
    x: &[f64],
    p: &[f64],
    grad_of_x: bool,
    perturb_x: bool,
    v: &[f64],
    w: &[f64],
    step: f64,
) -> Result<f64> {
    let d = x.len();
    let mut xp = [0.0; MAX_DIM];
    let mut pp = [0.0; MAX_DIM];
    let mut eval = |s: f64| -> Result<Vec<f64>> {
        xp[..d].copy_from_slice(x);
        pp[..d].copy_from_slice(p);
        for k in 0..d {
            if perturb_x {
                xp[k] += s * w[k];
            } else {
                pp[k] += s * w[k];
            }
        }
        if grad_of_x {
            h.grad_x(&xp[..d], &pp[..d])
        } else {
            h.grad_p(&xp[..d], &pp[..d])
        }
    };
    let gp = eval(step)?;
    let gm = eval(-step)?;
    Ok(v.iter().zip(gp.iter().zip(&gm)).map(|(v, (a, b))| v * (a - b) / (2.0 * step)).sum())
}

/// Left side of the differential Lasry-Lions condition, evaluated at
/// `rho = L(xi, phi(xi))` with tilde copies realized by the ensemble itself.
/// The condition holds when the value is `<= 0`.
pub fn ll_diff_form_h(
    rh: &ReducedHamiltonian,
    phi: impl Fn(&[f64]) -> Vec<f64>,
    xi: &ParticleEnsemble,
    eta: &[f64],
    gamma: &[f64],
    zeta: &[f64],
) -> Result<f64> {
    let nd = xi.as_slice().len();
    for len in [eta.len(), gamma.len(), zeta.len()] {
        same_size(nd, len)?;
    }
    let d = xi.dim();
    let rho = pushforward(xi, &phi)?;
    let base = rh.freeze(&rho, None)?;
    let warm = base.nu().seconds().to_vec();
    if eta.iter().chain(gamma).chain(zeta).all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let gz: Vec<f64> = gamma.iter().zip(zeta).map(|(g, z)| g + z).collect();
    let (dx, dp) = directional_grads(rh, &rho, &warm, Some(eta), Some(&gz))?;
    let mut s = 0.0;
    for i in 0..xi.len() {
        let r = i * d..(i + 1) * d;
        let (x, p) = (rho.state(i), rho.second(i));
        s += bilinear(&base, x, p, false, false, &zeta[r.clone()], &zeta[r.clone()], rh.steps.p)?;
        s -= dot(&eta[r.clone()], &dx[r.clone()]);
        let gmz: Vec<f64> = gamma[r.clone()].iter().zip(&zeta[r.clone()]).map(|(g, z)| g - z).collect();
        s -= dot(&gmz, &dp[r]);
    }
    ensure_finite(s / xi.len() as f64, "Lasry-Lions differential form")
}

/// Left side of the differential displacement lambda-condition at
/// `rho = L(xi, eta)`; the condition holds when the value is `<= 0`.
pub fn disp_diff_form_h(
    rh: &ReducedHamiltonian,
    rho: &JointEnsemble,
    gamma: &[f64],
    zeta: &[f64],
    lambda: f64,
) -> Result<f64> {
    let nd = rho.states().len();
    same_size(nd, gamma.len())?;
    same_size(nd, zeta.len())?;
    if gamma.iter().chain(zeta).all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let d = rho.dim();
    let base = rh.freeze(rho, None)?;
    let warm = base.nu().seconds().to_vec();
    // 1: states moved along gamma; 2: seconds moved along zeta.
    let (d1_x, d1_p) = directional_grads(rh, rho, &warm, Some(gamma), None)?;
    let (d2_x, d2_p) = directional_grads(rh, rho, &warm, None, Some(zeta))?;
    let (ex, ep) = (rh.steps.x, rh.steps.p);
    let mut s = 0.0;
    for i in 0..rho.len() {
        let r = i * d..(i + 1) * d;
        let (x, p) = (rho.state(i), rho.second(i));
        let (g, z) = (&gamma[r.clone()], &zeta[r.clone()]);
        let zpz = bilinear(&base, x, p, false, false, z, z, ep)?;
        let gxxg = bilinear(&base, x, p, true, true, g, g, ex)?;
        let gxpg = bilinear(&base, x, p, true, false, g, g, ep)?;
        let zppg = bilinear(&base, x, p, false, false, z, g, ep)?;
        s += zpz - (gxxg - 2.0 * lambda * gxpg);
        s += dot(z, &d1_p[r.clone()]) - dot(g, &d2_x[r.clone()]) + 2.0 * lambda * dot(g, &d2_p[r.clone()]);
        s += 2.0 * lambda * zppg;
        s += dot(z, &d2_p[r.clone()]);
        s -= dot(g, &d1_x[r.clone()]) - 2.0 * lambda * dot(g, &d1_p[r]);
    }
    ensure_finite(s / rho.len() as f64, "displacement differential form")
}

/// `int (f(x, a, rho1) - f(x, a, rho2)) (rho1 - rho2)(dx, da)`.
pub fn ll_lagrangian_gap(model: &dyn Lagrangian, rho1: &JointEnsemble, rho2: &JointEnsemble) -> Result<f64> {
    let f1 = model.law_features(rho1.states(), rho1.seconds());
    let f2 = model.law_features(rho2.states(), rho2.seconds());
    let avg = |rho: &JointEnsemble| -> f64 {
        let s: f64 = (0..rho.len())
            .map(|i| {
                let (x, a) = (rho.state(i), rho.second(i));
                model.running_cost(x, a, &f1) - model.running_cost(x, a, &f2)
            })
            .sum();
        s / rho.len() as f64
    };
    ensure_finite(avg(rho1) - avg(rho2), "Lagrangian Lasry-Lions gap")
}

/// Sampler settings for [`check`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Fixture family label echoed into the report.
    pub family: String,
    pub particles: usize,
    pub seed: u64,
    /// Draw `(gamma, zeta)` for the Lasry-Lions differential form
    /// independently instead of from `phi`.
    pub independent_directions: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            family: "gaussian-pairs".into(),
            particles: 8,
            seed: 0,
            independent_directions: false,
        }
    }
}

/// Outcome of a monotonicity scan.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MonotonicityReport {
    pub kind: GapKind,
    pub model: String,
    pub fixture: String,
    pub trials: usize,
    pub min_gap: f64,
    pub argmin_trial: usize,
    pub argmin_seed: u64,
    pub seed: u64,
    pub tolerance: f64,
    pub pass: bool,
}

fn normals(g: &mut rng::LabRng, n: usize, mean: f64, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(g);
            mean + std * z
        })
        .collect()
}

fn gaussian_ensemble(g: &mut rng::LabRng, n: usize, d: usize) -> Result<ParticleEnsemble> {
    let mean = g.gen_range(-1.0..1.0);
    let std = g.gen_range(0.5..1.5);
    ParticleEnsemble::new(d, normals(g, n * d, mean, std))
}

/// Per-trial seed derived from the run seed.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Evaluate one sampled instance of `kind`. Differential kinds return the
/// negated form so that every kind passes when the gap is nonnegative.
pub fn sample_gap(rh: &ReducedHamiltonian, kind: GapKind, cfg: &SamplerConfig, seed: u64) -> Result<f64> {
    let model = rh.model();
    let d = model.dim();
    let n = cfg.particles.max(1);
    let lambda = model.meta().lambda;
    let mut g = rng::stream(seed, 0);
    match kind {
        GapKind::LlU | GapKind::DispU => {
            let xi1 = gaussian_ensemble(&mut g, n, d)?;
            let xi2 = gaussian_ensemble(&mut g, n, d)?;
            if kind == GapKind::LlU {
                ll_gap_u(|x, mu| crate::hamiltonian::terminal_cost(model, x, mu), &xi1, &xi2)
            } else {
                disp_gap_u(
                    |x, mu| {
                        let f = model.terminal_features(mu.as_slice());
                        let mut out = vec![0.0; d];
                        model.terminal_grad(x, &f, &mut out);
                        out
                    },
                    lambda,
                    &xi1,
                    &xi2,
                )
            }
        }
        GapKind::LlHIntegral => {
            let mu1 = gaussian_ensemble(&mut g, n, d)?;
            let mu2 = gaussian_ensemble(&mut g, n, d)?;
            let alpha = g.gen_range(-1.0..1.0);
            let c = g.gen_range(-1.0..1.0);
            ll_gap_h(
                rh,
                |x, mu| {
                    let m = mu.mean();
                    x.iter().zip(&m).map(|(x, m)| alpha * x + c * m).collect()
                },
                &mu1,
                &mu2,
            )
        }
        GapKind::LlHDifferential => {
            let xi = gaussian_ensemble(&mut g, n, d)?;
            let eta = normals(&mut g, n * d, 0.0, 1.0);
            let alpha = g.gen_range(-1.0..1.0);
            let c = g.gen_range(-1.0..1.0);
            let m = xi.mean();
            let phi = |x: &[f64]| -> Vec<f64> { x.iter().zip(&m).map(|(x, m)| alpha * x + c * m).collect() };
            let (gamma, zeta) = if cfg.independent_directions {
                (normals(&mut g, n * d, 0.0, 1.0), normals(&mut g, n * d, 0.0, 1.0))
            } else {
                // gamma = d_x phi eta, zeta = E~[d_mu phi eta~] = c E[eta].
                let eta_mean = ParticleEnsemble::new(d, eta.clone())?.mean();
                let gamma = eta.iter().map(|e| alpha * e).collect();
                let zeta = (0..n * d).map(|k| c * eta_mean[k % d]).collect();
                (gamma, zeta)
            };
            Ok(-ll_diff_form_h(rh, phi, &xi, &eta, &gamma, &zeta)?)
        }
        GapKind::DispHIntegral => {
            let r1 = JointEnsemble::new(
                d,
                gaussian_ensemble(&mut g, n, d)?.into_vec(),
                gaussian_ensemble(&mut g, n, d)?.into_vec(),
            )?;
            let r2 = JointEnsemble::new(
                d,
                gaussian_ensemble(&mut g, n, d)?.into_vec(),
                gaussian_ensemble(&mut g, n, d)?.into_vec(),
            )?;
            disp_gap_h(rh, &r1, &r2, lambda)
        }
        GapKind::DispHDifferential => {
            let rho = JointEnsemble::new(
                d,
                gaussian_ensemble(&mut g, n, d)?.into_vec(),
                gaussian_ensemble(&mut g, n, d)?.into_vec(),
            )?;
            let gamma = normals(&mut g, n * d, 0.0, 1.0);
            let zeta = normals(&mut g, n * d, 0.0, 1.0);
            Ok(-disp_diff_form_h(rh, &rho, &gamma, &zeta, lambda)?)
        }
        GapKind::LlLagrangian => {
            let r1 = JointEnsemble::new(
                d,
                gaussian_ensemble(&mut g, n, d)?.into_vec(),
                gaussian_ensemble(&mut g, n, d)?.into_vec(),
            )?;
            let r2 = JointEnsemble::new(
                d,
                gaussian_ensemble(&mut g, n, d)?.into_vec(),
                gaussian_ensemble(&mut g, n, d)?.into_vec(),
            )?;
            ll_lagrangian_gap(model, &r1, &r2)
        }
    }
}

/// Evaluate `kind` on `trials` sampled instances and report the worst gap.
/// Trials run in parallel with per-trial derived seeds.
pub fn check(
    rh: &ReducedHamiltonian,
    kind: GapKind,
    cfg: &SamplerConfig,
    trials: usize,
    tolerance: f64,
) -> Result<MonotonicityReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let gaps: Vec<(usize, u64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let s = trial_seed(cfg.seed, t);
            sample_gap(rh, kind, cfg, s).map(|v| (t, s, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let (argmin_trial, argmin_seed, min_gap) = gaps
        .into_iter()
        .fold((0, 0, f64::INFINITY), |best, cur| if cur.2 < best.2 { cur } else { best });
    Ok(MonotonicityReport {
        kind,
        model: rh.model().name().to_string(),
        fixture: cfg.family.clone(),
        trials,
        min_gap,
        argmin_trial,
        argmin_seed,
        seed: cfg.seed,
        tolerance,
        pass: min_gap >= -tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LqModel;
    use std::sync::Arc;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn lq_rh(lq: LqModel) -> ReducedHamiltonian {
        ReducedHamiltonian::new(Arc::new(lq))
    }

    fn ens(v: &[f64]) -> ParticleEnsemble {
        ParticleEnsemble::from_scalars(v.to_vec()).unwrap()
    }

    #[test]
    fn terminal_gaps_match_closed_forms() {
        let lq = LqModel { lambda: 0.25, ..LqModel::displacement_fixture() };
        let xi1 = ens(&[0.3, -1.2, 2.0, 0.1]);
        let xi2 = ens(&[1.0, 0.4, -0.7, 0.9]);
        let ll = ll_gap_u(|x, mu| crate::hamiltonian::terminal_cost(&lq, x, mu), &xi1, &xi2).unwrap();
        let dm = mean(xi1.as_slice()) - mean(xi2.as_slice());
        assert!((ll - lq.s * dm * dm).abs() < 1e-14);
        let disp = disp_gap_u(|x, mu| vec![lq.g * x[0] + lq.s * mu.mean()[0]], lq.lambda, &xi1, &xi2).unwrap();
        let d: Vec<f64> = xi1.as_slice().iter().zip(xi2.as_slice()).map(|(a, b)| a - b).collect();
        let sq = mean(&d.iter().map(|v| v * v).collect::<Vec<_>>());
        let want = (lq.g + lq.lambda) * sq + lq.s * dm * dm;
        assert!((disp - want).abs() < 1e-14);
    }

    #[test]
    fn ll_gap_of_quadratic_is_squared_mean_gap() {
        // U = x m: gap = (m1 - m2)^2.
        let xi1 = ens(&[0.0, 2.0]);
        let xi2 = ens(&[-1.0, -1.0]);
        let g = ll_gap_u(|x, mu| x[0] * mu.mean()[0], &xi1, &xi2).unwrap();
        assert!((g - 4.0).abs() < 1e-14);
    }

    #[test]
    fn ll_hamiltonian_gap_matches_lq_formula() {
        let lq = LqModel::coupled();
        let kappa = lq.kappa();
        let rh = lq_rh(lq);
        let mu1 = ens(&[0.3, -1.2, 2.0, 0.1, 0.5]);
        let mu2 = ens(&[1.0, 0.4, -0.7, 0.9, -0.2]);
        let (alpha, c) = (0.7, -0.4);
        let phi = |x: &[f64], mu: &ParticleEnsemble| vec![alpha * x[0] + c * mu.mean()[0]];
        let got = ll_gap_h(&rh, phi, &mu1, &mu2).unwrap();
        let (m1, m2) = (mean(mu1.as_slice()), mean(mu2.as_slice()));
        let (pb1, pb2) = ((alpha + c) * m1, (alpha + c) * m2);
        let dpsi = |x: f64| (alpha * x + c * m1 - kappa * pb1) - (alpha * x + c * m2 - kappa * pb2);
        let half = |mu: &ParticleEnsemble| 0.5 * mean(&mu.as_slice().iter().map(|&x| dpsi(x).powi(2)).collect::<Vec<_>>());
        let want = half(&mu1) + half(&mu2) + kappa * (1.0 - kappa) * (pb1 - pb2).powi(2) + lq.r * (m1 - m2).powi(2);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn displacement_hamiltonian_gap_matches_lq_formula() {
        let lq = LqModel { lambda: 0.3, ..LqModel::coupled() };
        let kappa = lq.kappa();
        let rh = lq_rh(lq);
        let r1 = JointEnsemble::from_pairs_1d(&[(0.3, 1.0), (-1.2, 0.2), (2.0, -0.5)]).unwrap();
        let r2 = JointEnsemble::from_pairs_1d(&[(0.1, -0.3), (0.8, 0.9), (-0.4, 0.0)]).unwrap();
        let got = disp_gap_h(&rh, &r1, &r2, lq.lambda).unwrap();
        let dx: Vec<f64> = r1.states().iter().zip(r2.states()).map(|(a, b)| a - b).collect();
        let dp: Vec<f64> = r1.seconds().iter().zip(r2.seconds()).map(|(a, b)| a - b).collect();
        let e = |f: &dyn Fn(usize) -> f64| mean(&(0..3).map(f).collect::<Vec<_>>());
        let (mx, mp) = (mean(&dx), mean(&dp));
        let want = lq.q * e(&|i| dx[i] * dx[i]) + lq.r * mx * mx + e(&|i| dp[i] * dp[i]) - kappa * mp * mp
            + 2.0 * lq.lambda * (e(&|i| dp[i] * dx[i]) - kappa * mp * mx);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn differential_forms_match_lq_formulas() {
        let lq = LqModel { lambda: 0.4, ..LqModel::displacement_fixture() };
        let kappa = lq.kappa();
        let rh = lq_rh(lq);
        let rho = JointEnsemble::from_pairs_1d(&[(0.3, 1.0), (-1.2, 0.2), (2.0, -0.5), (0.0, 0.7)]).unwrap();
        let gamma = [0.5, -1.0, 0.25, 0.8];
        let zeta = [-0.3, 0.6, 1.1, 0.2];
        let got = disp_diff_form_h(&rh, &rho, &gamma, &zeta, lq.lambda).unwrap();
        let (eg, ez) = (mean(&gamma), mean(&zeta));
        let e2 = |a: &[f64], b: &[f64]| mean(&a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>());
        let want = -e2(&zeta, &zeta) - lq.q * e2(&gamma, &gamma) + 2.0 * lq.lambda * kappa * eg * ez
            - 2.0 * lq.lambda * e2(&zeta, &gamma)
            + kappa * ez * ez
            - lq.r * eg * eg;
        assert!((got - want).abs() < 5e-6, "{got} vs {want}");

        let xi = ens(&[0.3, -1.2, 2.0, 0.1]);
        let eta = [0.2, -0.4, 1.0, 0.3];
        let got = ll_diff_form_h(&rh, |x| vec![0.5 * x[0] - 0.1], &xi, &eta, &gamma, &zeta).unwrap();
        let want = -e2(&zeta, &zeta) - lq.r * mean(&eta).powi(2) - kappa * (eg * eg - ez * ez);
        assert!((got - want).abs() < 5e-6, "{got} vs {want}");
    }

    #[test]
    fn second_difference_recovers_the_differential_form() {
        let lq = LqModel { lambda: 0.2, ..LqModel::coupled() };
        let rh = lq_rh(lq);
        let rho = JointEnsemble::from_pairs_1d(&[(0.3, 1.0), (-1.2, 0.2), (2.0, -0.5)]).unwrap();
        let (gamma, zeta) = ([0.5, -1.0, 0.25], [-0.3, 0.6, 1.1]);
        let form = disp_diff_form_h(&rh, &rho, &gamma, &zeta, lq.lambda).unwrap();
        let eps = 1e-3;
        let moved = shifted_joint(&shifted_joint(&rho, Some(&gamma), None, eps).unwrap(), None, Some(&zeta), eps).unwrap();
        let gap = disp_gap_h(&rh, &moved, &rho, lq.lambda).unwrap();
        assert!((gap / (eps * eps) + form).abs() < 1e-6 * form.abs().max(1.0));
    }

    #[test]
    fn lagrangian_gap_is_squared_control_mean_gap() {
        let lq = LqModel { k: 1.0, q: 0.0, r: 0.0, ..LqModel::uncoupled() };
        let r1 = JointEnsemble::from_pairs_1d(&[(0.0, 1.0), (1.0, 2.0)]).unwrap();
        let r2 = JointEnsemble::from_pairs_1d(&[(0.5, -1.0), (2.0, 0.0)]).unwrap();
        let g = ll_lagrangian_gap(&lq, &r1, &r2).unwrap();
        assert!((g - 4.0).abs() < 1e-14);
    }

    #[test]
    fn check_flags_the_non_monotone_fixture() {
        let cfg = SamplerConfig { seed: 7, ..SamplerConfig::default() };
        let ll = lq_rh(LqModel::lasry_lions_fixture());
        let disp = lq_rh(LqModel::displacement_fixture());
        for kind in [GapKind::LlU, GapKind::LlHIntegral] {
            assert!(check(&ll, kind, &cfg, 50, 1e-8).unwrap().pass, "{kind:?}");
            assert!(!check(&disp, kind, &cfg, 50, 1e-8).unwrap().pass, "{kind:?}");
        }
        let rep = check(&disp, GapKind::DispU, &cfg, 50, 1e-8).unwrap();
        assert!(rep.pass && rep.trials == 50);
        assert!(!check(&ll, GapKind::DispU, &cfg, 50, 1e-8).unwrap().pass);
        assert_eq!(GapKind::parse("disp-h-differential").unwrap(), GapKind::DispHDifferential);
    }
}
