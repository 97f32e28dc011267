//! Small dense/banded linear algebra kernels used by the solvers.

use crate::error::{Error, Result};

/// Tridiagonal system with one extra coefficient in the first and last rows.
///
/// Row 0 reads `diag[0] x0 + upper[0] x1 + first_extra x2`, row `n-1` reads
/// `last_extra x[n-3] + lower[n-1] x[n-2] + diag[n-1] x[n-1]`. Both corner
/// entries are eliminated against the neighbouring row before a Thomas sweep.
/// `lower[0]` and `upper[n-1]` are ignored.
#[derive(Debug, Clone)]
pub struct CorneredTridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
    pub first_extra: f64,
    pub last_extra: f64,
}

impl CorneredTridiagonal {
    pub fn new(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
            first_extra: 0.0,
            last_extra: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        if rhs.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: rhs.len(),
            });
        }
        let mut lower = self.lower.clone();
        let mut diag = self.diag.clone();
        let mut upper = self.upper.clone();
        let mut rhs = rhs.to_vec();
        if n >= 3 && self.first_extra != 0.0 {
            // row0 -= (e / upper[1]) * row1
            if upper[1] == 0.0 {
                return Err(Error::Singular("corner elimination (first row)".into()));
            }
            let f = self.first_extra / upper[1];
            diag[0] -= f * lower[1];
            upper[0] -= f * diag[1];
            rhs[0] -= f * rhs[1];
        }
        if n >= 3 && self.last_extra != 0.0 {
            let k = n - 2;
            if lower[k] == 0.0 {
                return Err(Error::Singular("corner elimination (last row)".into()));
            }
            let f = self.last_extra / lower[k];
            lower[n - 1] -= f * diag[k];
            diag[n - 1] -= f * upper[k];
            rhs[n - 1] -= f * rhs[k];
        }
        lower[0] = 0.0;
        upper[n - 1] = 0.0;
        thomas(&lower, &diag, &upper, &rhs)
    }
}

/// Thomas algorithm for a tridiagonal system.
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom.abs() < 1e-300 {
        return Err(Error::Singular("zero pivot in row 0".into()));
    }
    c[0] = upper[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom.abs() < 1e-300 || !denom.is_finite() {
            return Err(Error::Singular(format!("zero pivot in row {i}")));
        }
        c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Ok(x)
}

/// Not-a-knot cubic spline on a uniform grid. Reproduces cubics exactly.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    x0: f64,
    h: f64,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(x0: f64, h: f64, y: &[f64]) -> Result<Self> {
        let n = y.len();
        if n < 2 || h <= 0.0 {
            return Err(Error::InvalidArgument(
                "spline needs at least two nodes and a positive spacing".into(),
            ));
        }
        let m = if n < 4 {
            // Too few nodes for not-a-knot: fall back to the interpolating
            // polynomial's (constant) second derivative, or zero.
            if n == 3 {
                let c = (y[0] - 2.0 * y[1] + y[2]) / (h * h);
                vec![c; 3]
            } else {
                vec![0.0; n]
            }
        } else {
            // Not-a-knot: m0 = 2 m1 - m2 and m[n-1] = 2 m[n-2] - m[n-3],
            // substituted into the first and last interior rows.
            let k = n - 2;
            let mut lower = vec![1.0; k];
            let mut diag = vec![4.0; k];
            let mut upper = vec![1.0; k];
            let rhs: Vec<f64> = (1..n - 1)
                .map(|i| 6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]) / (h * h))
                .collect();
            diag[0] += 2.0;
            upper[0] -= 1.0;
            diag[k - 1] += 2.0;
            lower[k - 1] -= 1.0;
            lower[0] = 0.0;
            upper[k - 1] = 0.0;
            let inner = thomas(&lower, &diag, &upper, &rhs)?;
            let mut m = Vec::with_capacity(n);
            m.push(2.0 * inner[0] - inner[1]);
            m.extend_from_slice(&inner);
            m.push(2.0 * inner[k - 1] - inner[k - 2]);
            m
        };
        Ok(Self {
            x0,
            h,
            y: y.to_vec(),
            m,
        })
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let n = self.y.len();
        let s = (x - self.x0) / self.h;
        let i = if s <= 0.0 {
            0
        } else {
            (s.floor() as usize).min(n - 2)
        };
        (i, x - (self.x0 + i as f64 * self.h))
    }

    /// Value, first and second derivative at `x` (cubic extrapolation outside the grid).
    pub fn eval_all(&self, x: f64) -> (f64, f64, f64) {
        let (i, t) = self.locate(x);
        let h = self.h;
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let b = (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0;
        let c = m0 / 2.0;
        let d = (m1 - m0) / (6.0 * h);
        let value = y0 + t * (b + t * (c + t * d));
        let first = b + t * (2.0 * c + 3.0 * d * t);
        let second = 2.0 * c + 6.0 * d * t;
        (value, first, second)
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval_all(x).0
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.eval_all(x).1
    }
}

/// Minimum-cost perfect matching on a square cost matrix (row-major, `n x n`).
///
/// Shortest augmenting path with row/column potentials, `O(n^3)`. Returns
/// `assignment[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            found: cost.len(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    // 1-based bookkeeping; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Least-squares polynomial fit `y ~ sum_k c_k x^k` with `k <= degree`.
///
/// The design is centred and scaled before the SVD solve; the returned
/// coefficients are in the raw monomial basis. Fails with
/// [`Error::RankDeficient`] when the scaled design's condition number
/// exceeds `max_condition`.
pub fn polyfit(
    x: &[f64],
    y: &[f64],
    degree: usize,
    max_condition: f64,
    step: usize,
) -> Result<Vec<f64>> {
    use nalgebra::{DMatrix, DVector};

    let n = x.len();
    if n != y.len() {
        return Err(Error::SizeMismatch {
            left: n,
            right: y.len(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let scale = var.sqrt();
    if degree == 0 || scale <= 1e-12 * (1.0 + mean.abs()) {
        let c = y.iter().sum::<f64>() / n as f64;
        let mut out = vec![0.0; degree + 1];
        out[0] = c;
        return Ok(out);
    }
    let cols = degree + 1;
    let mut design = DMatrix::<f64>::zeros(n, cols);
    for (r, &xi) in x.iter().enumerate() {
        let z = (xi - mean) / scale;
        let mut pow = 1.0;
        for c in 0..cols {
            design[(r, c)] = pow;
            pow *= z;
        }
    }
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= max_condition) {
        return Err(Error::RankDeficient { step, condition });
    }
    let rhs = DVector::from_column_slice(y);
    let z_coef = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::Singular(e.to_string()))?;
    // Expand sum_k z_k ((x - mean)/scale)^k into raw monomials.
    let mut raw = vec![0.0; cols];
    for k in 0..cols {
        let ck = z_coef[k] / scale.powi(k as i32);
        // (x - mean)^k = sum_j binom(k, j) x^j (-mean)^(k-j)
        let mut binom = 1.0;
        for j in 0..=k {
            raw[j] += ck * binom * (-mean).powi((k - j) as i32);
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
    }
    Ok(raw)
}

/// Horner evaluation of raw monomial coefficients.
pub fn polyval(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thomas_solves_poisson_stencil() {
        let n = 6;
        let lower = vec![-1.0; n];
        let diag = vec![2.0; n];
        let upper = vec![-1.0; n];
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            rhs[i] = 2.0 * x_true[i];
            if i > 0 {
                rhs[i] -= x_true[i - 1];
            }
            if i + 1 < n {
                rhs[i] -= x_true[i + 1];
            }
        }
        let x = thomas(&lower, &diag, &upper, &rhs).unwrap();
        for (a, b) in x.iter().zip(&x_true) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_entries_are_eliminated() {
        // Dense reference: 4x4 with corners.
        let mut sys = CorneredTridiagonal::new(4);
        sys.diag = vec![3.0, 4.0, 5.0, 6.0];
        sys.upper = vec![1.0, 1.5, 0.5, 0.0];
        sys.lower = vec![0.0, 0.7, 0.2, 1.1];
        sys.first_extra = 0.3;
        sys.last_extra = -0.4;
        let x_true = [1.0, -2.0, 0.5, 3.0];
        let a = [
            [3.0, 1.0, 0.3, 0.0],
            [0.7, 4.0, 1.5, 0.0],
            [0.0, 0.2, 5.0, 0.5],
            [0.0, -0.4, 1.1, 6.0],
        ];
        let rhs: Vec<f64> = a
            .iter()
            .map(|row| row.iter().zip(&x_true).map(|(r, x)| r * x).sum())
            .collect();
        let x = sys.solve(&rhs).unwrap();
        for (a, b) in x.iter().zip(&x_true) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn spline_reproduces_cubics() {
        let f = |x: f64| 0.3 * x * x * x - x * x + 2.0 * x - 1.0;
        let y: Vec<f64> = (0..9).map(|i| f(-1.0 + 0.5 * i as f64)).collect();
        let s = CubicSpline::new(-1.0, 0.5, &y).unwrap();
        for &x in &[-0.9, -0.2, 0.77, 2.4, 2.99] {
            let (v, d1, d2) = s.eval_all(x);
            assert!((v - f(x)).abs() < 1e-12);
            assert!((d1 - (0.9 * x * x - 2.0 * x + 2.0)).abs() < 1e-11);
            assert!((d2 - (1.8 * x - 2.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let n = 5;
        let cost: Vec<f64> = (0..n * n)
            .map(|k| ((k * 37 + 11) % 17) as f64 * 0.7 - (k % 3) as f64)
            .collect();
        let a = hungarian(&cost, n).unwrap();
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..n).collect();
        permute(&mut perm, 0, &mut |p| {
            let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            best = best.min(c);
        });
        assert!((total - best).abs() < 1e-12);
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn polyfit_recovers_cubic() {
        let x: Vec<f64> = (0..50).map(|i| 3.0 + 0.1 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v + 0.5 * v * v * v).collect();
        let c = polyfit(&x, &y, 3, 1e12, 0).unwrap();
        for &v in &[3.0, 4.2, 7.9] {
            assert!((polyval(&c, v) - (1.0 - 2.0 * v + 0.5 * v * v * v)).abs() < 1e-8);
        }
    }

    #[test]
    fn polyfit_flags_degenerate_design() {
        // Two tight clusters cannot support a cubic.
        let mut x = Vec::new();
        for i in 0..20 {
            x.push(1e-13 * i as f64);
            x.push(1.0 + 1e-13 * i as f64);
        }
        let y: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        assert!(matches!(
            polyfit(&x, &y, 3, 1e8, 4),
            Err(Error::RankDeficient { step: 4, .. })
        ));
    }
}
