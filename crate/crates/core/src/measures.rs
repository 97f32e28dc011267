//! Empirical measures: particle ensembles, joint (state, second) ensembles and
//! 1-d densities on uniform grids.
//!
//! All ensembles are equal-weight. Transport distances are exact: sorted
//! quantile coupling in d = 1 and optimal assignment for d >= 2.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::hungarian;
use crate::rng;

/// Largest ensemble accepted by the assignment solver (d >= 2).
pub const ASSIGNMENT_CAP: usize = 512;

/// Floor below which [`geodesic_velocity_1d`] refuses to divide.
pub const DENSITY_FLOOR: f64 = 1e-10;

/// Equal-weight empirical measure on R^d, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    data: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if data.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: data.len() % dim,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("particle coordinates".into()));
        }
        Ok(Self { dim, data })
    }

    /// One-dimensional ensemble from scalar positions.
    pub fn from_scalars(xs: Vec<f64>) -> Result<Self> {
        Self::new(1, xs)
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().ok_or(Error::EmptyEnsemble)?.len();
        let mut data = Vec::with_capacity(dim * points.len());
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.len(),
                });
            }
            data.extend_from_slice(p);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Flat coordinates (the positions themselves when d = 1).
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for p in self.points() {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Per-coordinate (population) variance.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim];
        for p in self.points() {
            for k in 0..self.dim {
                v[k] += (p[k] - m[k]).powi(2);
            }
        }
        let n = self.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    /// Apply `f` to every coordinate.
    pub fn map_coords(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.dim, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((1..=self.dim).map(|k| format!("x_{k}")))?;
        for p in self.points() {
            w.write_record(p.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let dim = r.headers()?.len();
        let mut data = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: rec.len(),
                });
            }
            for field in rec.iter() {
                data.push(parse_f64(field)?);
            }
        }
        Self::new(dim, data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn parse_f64(field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("{field:?}: {e}")))
}

/// Equal-weight empirical measure on R^d x R^d: states paired with a second
/// coordinate (momentum or control).
#[derive(Debug, Clone, PartialEq)]
pub struct JointEnsemble {
    dim: usize,
    states: Vec<f64>,
    seconds: Vec<f64>,
}

impl JointEnsemble {
    pub fn new(dim: usize, states: Vec<f64>, seconds: Vec<f64>) -> Result<Self> {
        if states.len() != seconds.len() {
            return Err(Error::SizeMismatch {
                left: states.len() / dim.max(1),
                right: seconds.len() / dim.max(1),
            });
        }
        // Reuse the particle checks for both halves.
        let states = ParticleEnsemble::new(dim, states)?.into_vec();
        let seconds = ParticleEnsemble::new(dim, seconds)?.into_vec();
        Ok(Self {
            dim,
            states,
            seconds,
        })
    }

    pub fn from_pairs_1d(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            1,
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn second(&self, i: usize) -> &[f64] {
        &self.seconds[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn seconds(&self) -> &[f64] {
        &self.seconds
    }

    pub fn first_marginal(&self) -> ParticleEnsemble {
        ParticleEnsemble {
            dim: self.dim,
            data: self.states.clone(),
        }
    }

    pub fn second_marginal(&self) -> ParticleEnsemble {
        ParticleEnsemble {
            dim: self.dim,
            data: self.seconds.clone(),
        }
    }

    /// Same states, new second coordinates.
    pub fn with_seconds(&self, seconds: Vec<f64>) -> Result<Self> {
        Self::new(self.dim, self.states.clone(), seconds)
    }

    /// Same seconds, new states.
    pub fn with_states(&self, states: Vec<f64>) -> Result<Self> {
        Self::new(self.dim, states, self.seconds.clone())
    }

    pub fn state_mean(&self) -> Vec<f64> {
        self.first_marginal().mean()
    }

    pub fn second_mean(&self) -> Vec<f64> {
        self.second_marginal().mean()
    }

    /// The joint law as an ensemble on R^{2d}: rows (x, p).
    pub fn as_particles(&self) -> ParticleEnsemble {
        let mut data = Vec::with_capacity(2 * self.states.len());
        for i in 0..self.len() {
            data.extend_from_slice(self.state(i));
            data.extend_from_slice(self.second(i));
        }
        ParticleEnsemble {
            dim: 2 * self.dim,
            data,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (1..=self.dim)
            .map(|k| format!("x_{k}"))
            .chain((1..=self.dim).map(|k| format!("p_{k}")))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.len() {
            w.write_record(
                self.state(i)
                    .iter()
                    .chain(self.second(i))
                    .map(|v| format!("{v:e}")),
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let width = r.headers()?.len();
        if width == 0 || width % 2 != 0 {
            return Err(Error::Parse(format!(
                "joint ensemble needs an even number of columns, found {width}"
            )));
        }
        let dim = width / 2;
        let (mut states, mut seconds) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != width {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    found: rec.len(),
                });
            }
            for (k, field) in rec.iter().enumerate() {
                let v = parse_f64(field)?;
                if k < dim {
                    states.push(v);
                } else {
                    seconds.push(v);
                }
            }
        }
        Self::new(dim, states, seconds)
    }
}

/// Pairs every particle with `map(x)`. The first marginal is `a` itself.
pub fn pushforward(
    a: &ParticleEnsemble,
    map: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<JointEnsemble> {
    let mut seconds = Vec::with_capacity(a.data.len());
    for p in a.points() {
        let v = map(p);
        if v.len() != a.dim {
            return Err(Error::DimensionMismatch {
                expected: a.dim,
                found: v.len(),
            });
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("pushforward map".into()));
        }
        seconds.extend(v);
    }
    Ok(JointEnsemble {
        dim: a.dim,
        states: a.data.clone(),
        seconds,
    })
}

/// Transport order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Order {
    W1,
    W2,
}

impl Order {
    pub fn from_int(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Order::W1),
            2 => Ok(Order::W2),
            _ => Err(Error::InvalidArgument(format!(
                "Wasserstein order must be 1 or 2, got {p}"
            ))),
        }
    }

    fn cost(self, d: f64) -> f64 {
        match self {
            Order::W1 => d,
            Order::W2 => d * d,
        }
    }

    fn root(self, c: f64) -> f64 {
        match self {
            Order::W1 => c,
            Order::W2 => c.max(0.0).sqrt(),
        }
    }
}

/// Exact W_1 or W_2 distance between equal-weight ensembles.
pub fn wasserstein(order: Order, a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            found: b.dim,
        });
    }
    if a.dim == 1 {
        Ok(wasserstein_sorted(order, &a.data, &b.data))
    } else {
        wasserstein_assignment(order, a, b)
    }
}

/// d = 1: quantile coupling on the common refinement of the two empirical
/// CDFs. Breakpoints i/n and j/m are compared as integers i*m and j*n.
fn wasserstein_sorted(order: Order, a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as u128, b.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos: u128 = 0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let next = next_a.min(next_b);
        total += (next - pos) as f64 * order.cost((a[i] - b[j]).abs());
        pos = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
    order.root(total / (n * m) as f64)
}

fn wasserstein_assignment(
    order: Order,
    a: &ParticleEnsemble,
    b: &ParticleEnsemble,
) -> Result<f64> {
    let n = a.len();
    if n != b.len() {
        return Err(Error::SizeMismatch {
            left: n,
            right: b.len(),
        });
    }
    if n > ASSIGNMENT_CAP {
        return Err(Error::TooLarge {
            n,
            cap: ASSIGNMENT_CAP,
        });
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d2: f64 = a
                .point(i)
                .iter()
                .zip(b.point(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            cost[i * n + j] = order.cost(d2.sqrt());
        }
    }
    let assignment = hungarian(&cost, n)?;
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok(order.root(total / n as f64))
}

/// Root-mean-square distance under the index coupling. An upper bound on W_2.
pub fn paired_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

/// Resample `a` with replacement: an i.i.d. draw from its empirical law.
///
/// Indices come from `rng::stream(seed, 0)` via `gen_range(0..N)`, one per
/// output particle in order.
pub fn independent_copy(a: &ParticleEnsemble, seed: u64) -> ParticleEnsemble {
    let n = a.len();
    let mut g = rng::stream(seed, 0);
    let mut data = Vec::with_capacity(a.data.len());
    for _ in 0..n {
        let k = g.gen_range(0..n);
        data.extend_from_slice(a.point(k));
    }
    ParticleEnsemble { dim: a.dim, data }
}

/// Density on a uniform 1-d grid, normalized to unit trapezoidal mass and
/// read as its piecewise-linear interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid1d {
    x_min: f64,
    dx: f64,
    values: Vec<f64>,
}

impl DensityGrid1d {
    /// Normalizes `values` on the grid `x_min + i * dx`.
    pub fn new(x_min: f64, dx: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument(
                "density grid needs at least two nodes".into(),
            ));
        }
        if !(dx > 0.0) || !x_min.is_finite() {
            return Err(Error::InvalidArgument("grid spacing must be positive".into()));
        }
        if let Some((i, &v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(if v.is_finite() {
                Error::NegativeDensity { step: i, value: v }
            } else {
                Error::NonFinite("density values".into())
            });
        }
        let mass = trapezoid(&values, dx);
        if !(mass > 0.0) {
            return Err(Error::InvalidArgument("density has zero mass".into()));
        }
        let values = values.into_iter().map(|v| v / mass).collect();
        Ok(Self { x_min, dx, values })
    }

    /// Grid `[x_min, x_max]` with `n` nodes.
    pub fn on_interval(x_min: f64, x_max: f64, n: usize, values: Vec<f64>) -> Result<Self> {
        if n < 2 || values.len() != n || !(x_max > x_min) {
            return Err(Error::InvalidArgument(format!(
                "need x_max > x_min and {n} >= 2 matching values (got {})",
                values.len()
            )));
        }
        Self::new(x_min, (x_max - x_min) / (n - 1) as f64, values)
    }

    pub fn gaussian(x_min: f64, x_max: f64, n: usize, mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::InvalidArgument("standard deviation must be positive".into()));
        }
        let dx = (x_max - x_min) / (n.max(2) - 1) as f64;
        let values = (0..n)
            .map(|i| {
                let z = (x_min + i as f64 * dx - mean) / std;
                (-0.5 * z * z).exp()
            })
            .collect();
        Self::on_interval(x_min, x_max, n, values)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x(self.values.len() - 1)
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.x_min == other.x_min && self.dx == other.dx && self.values.len() == other.values.len()
    }

    pub fn mass(&self) -> f64 {
        trapezoid(&self.values, self.dx)
    }

    /// Trapezoidal moment `sum_i w_i x_i^k m_i`.
    pub fn moment(&self, k: i32) -> f64 {
        let n = self.values.len();
        let mut s = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            let w = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
            s += w * v * self.x(i).powi(k);
        }
        s * self.dx
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let n = self.values.len();
        let mut s = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            let w = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
            s += w * v * (self.x(i) - m).powi(2);
        }
        s * self.dx
    }

    /// Trapezoidal cumulative at the nodes.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        f.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * self.dx * (w[0] + w[1]);
            f.push(acc);
        }
        f
    }

    /// Interpolated density value at `x` (zero outside the grid).
    pub fn value_at(&self, x: f64) -> f64 {
        let s = (x - self.x_min) / self.dx;
        if s < 0.0 || s > (self.values.len() - 1) as f64 {
            return 0.0;
        }
        let i = (s.floor() as usize).min(self.values.len() - 2);
        let t = s - i as f64;
        self.values[i] * (1.0 - t) + self.values[i + 1] * t
    }

    /// Cumulative mass and first moment of the interpolant on
    /// `[x_i, x_i + tau]`.
    fn cell_partial(&self, i: usize, tau: f64) -> (f64, f64) {
        let (m0, m1) = (self.values[i], self.values[i + 1]);
        let sigma = (m1 - m0) / self.dx;
        let xi = self.x(i);
        let mass = m0 * tau + 0.5 * sigma * tau * tau;
        let first = xi * m0 * tau + 0.5 * (xi * sigma + m0) * tau * tau + sigma * tau.powi(3) / 3.0;
        (mass, first)
    }

    /// Offset `tau` in cell `i` at which the partial mass reaches `r`.
    fn cell_invert(&self, i: usize, r: f64) -> f64 {
        let m0 = self.values[i];
        let sigma = (self.values[i + 1] - m0) / self.dx;
        if r <= 0.0 {
            return 0.0;
        }
        let disc = (m0 * m0 + 2.0 * sigma * r).max(0.0);
        let denom = m0 + disc.sqrt();
        let tau = if denom > 0.0 { 2.0 * r / denom } else { self.dx };
        tau.clamp(0.0, self.dx)
    }

    /// Quantile function of the interpolant at probability levels `levels`
    /// (sorted ascending). Returns, for each level, the location and the
    /// cumulative first moment up to it.
    fn quantiles_sorted(&self, levels: &[f64]) -> Vec<(f64, f64)> {
        let cum = self.cumulative();
        let n = self.values.len();
        // Cumulative first moments at the nodes.
        let mut first = vec![0.0; n];
        for i in 0..n - 1 {
            first[i + 1] = first[i] + self.cell_partial(i, self.dx).1;
        }
        let total = cum[n - 1];
        let mut out = Vec::with_capacity(levels.len());
        let mut cell = 0usize;
        for &level in levels {
            let r = level * total;
            while cell + 2 < n && cum[cell + 1] <= r {
                cell += 1;
            }
            let tau = self.cell_invert(cell, r - cum[cell]);
            let (_, g) = self.cell_partial(cell, tau);
            out.push((self.x(cell) + tau, first[cell] + g));
        }
        out
    }

    /// Deterministic `n`-particle projection: particle k is the barycenter of
    /// the k-th probability slab `[k/n, (k+1)/n]` of the interpolant. The
    /// projection's mean equals the interpolant's mean.
    pub fn quantile_projection(&self, n: usize) -> Result<ParticleEnsemble> {
        if n == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let levels: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
        let q = self.quantiles_sorted(&levels);
        let total = *self.cumulative().last().unwrap();
        let scale = n as f64 / total;
        let mut pts = Vec::with_capacity(n);
        for k in 0..n {
            let lo = q[k].0;
            let hi = q[k + 1].0;
            let bary = (q[k + 1].1 - q[k].1) * scale;
            // Guard against round-off pushing the barycenter outside its slab.
            pts.push(if hi > lo { bary.clamp(lo, hi) } else { lo });
        }
        ParticleEnsemble::from_scalars(pts)
    }

    /// Quantile (inverse CDF) at probability `u` in [0, 1].
    pub fn quantile(&self, u: f64) -> f64 {
        self.quantiles_sorted(&[u.clamp(0.0, 1.0)])[0].0
    }

    /// `n` i.i.d. draws by inverse-CDF sampling from `rng::stream(seed, 0)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<ParticleEnsemble> {
        let mut g = rng::stream(seed, 0);
        let mut u: Vec<(f64, usize)> = (0..n).map(|k| (g.gen::<f64>(), k)).collect();
        u.sort_by(|a, b| a.0.total_cmp(&b.0));
        let levels: Vec<f64> = u.iter().map(|v| v.0).collect();
        let q = self.quantiles_sorted(&levels);
        let mut out = vec![0.0; n];
        for ((_, k), (x, _)) in u.iter().zip(q) {
            out[*k] = x;
        }
        ParticleEnsemble::from_scalars(out)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([format!("{:e}", self.x(i)), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let (mut xs, mut vs) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Parse("density rows must be (x, value)".into()));
            }
            xs.push(parse_f64(&rec[0])?);
            vs.push(parse_f64(&rec[1])?);
        }
        if xs.len() < 2 {
            return Err(Error::InvalidArgument("density grid needs at least two nodes".into()));
        }
        let dx = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
        for (i, x) in xs.iter().enumerate() {
            if (x - (xs[0] + i as f64 * dx)).abs() > 1e-9 * (1.0 + dx) {
                return Err(Error::Parse("density grid is not uniform".into()));
            }
        }
        Self::new(xs[0], dx, vs)
    }
}

fn trapezoid(values: &[f64], dx: f64) -> f64 {
    let n = values.len();
    let inner: f64 = values[1..n - 1].iter().sum();
    dx * (inner + 0.5 * (values[0] + values[n - 1]))
}

/// Pointwise `t * m1 + (1 - t) * m2`.
pub fn mixture_interpolate(m1: &DensityGrid1d, m2: &DensityGrid1d, t: f64) -> Result<DensityGrid1d> {
    if !m1.same_grid(m2) {
        return Err(Error::GridMismatch);
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("interpolation time {t} outside [0, 1]")));
    }
    let values = m1
        .values
        .iter()
        .zip(&m2.values)
        .map(|(a, b)| t * a + (1.0 - t) * b)
        .collect();
    // A convex combination of unit-mass densities already has unit mass;
    // skipping renormalization keeps the endpoints bitwise exact.
    Ok(DensityGrid1d {
        x_min: m1.x_min,
        dx: m1.dx,
        values,
    })
}

/// Velocity field `v = (F2 - F1) / m_t` of the mixture path
/// `m_t = t m1 + (1 - t) m2` on the node range `range`.
///
/// It solves `d/dt m_t + d/dx (m_t v) = 0` with zero flux at the boundary.
pub fn geodesic_velocity_1d(
    m1: &DensityGrid1d,
    m2: &DensityGrid1d,
    t: f64,
    range: Range<usize>,
) -> Result<Vec<f64>> {
    if !m1.same_grid(m2) {
        return Err(Error::GridMismatch);
    }
    if range.end > m1.len() {
        return Err(Error::InvalidArgument(format!(
            "node range {range:?} exceeds grid of {} nodes",
            m1.len()
        )));
    }
    let f1 = m1.cumulative();
    let f2 = m2.cumulative();
    range
        .map(|i| {
            let mt = t * m1.values[i] + (1.0 - t) * m2.values[i];
            if mt < DENSITY_FLOOR {
                return Err(Error::DensityFloor {
                    index: i,
                    x: m1.x(i),
                    value: mt,
                    floor: DENSITY_FLOOR,
                });
            }
            Ok((f2[i] - f1[i]) / mt)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ens(xs: &[f64]) -> ParticleEnsemble {
        ParticleEnsemble::from_scalars(xs.to_vec()).unwrap()
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein(Order::W2, &ens(&[0.0]), &ens(&[3.0])).unwrap(), 3.0);
        let a = ens(&[0.3, -1.0, 2.0]);
        assert_eq!(wasserstein(Order::W2, &a, &a).unwrap(), 0.0);
        let w = wasserstein(Order::W2, &ens(&[0.0, 1.0]), &ens(&[0.5, 1.5])).unwrap();
        assert_abs_diff_eq!(w, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn unequal_sizes_use_common_refinement() {
        // {0, 1} vs {0, 0.5, 1}: slabs of width 1/6 pair
        // (0,0) (0,0) (0,.5) | (1,.5) (1,1) (1,1) -> W1 = (0.5 + 0.5)/6.
        let w = wasserstein(Order::W1, &ens(&[0.0, 1.0]), &ens(&[0.0, 0.5, 1.0])).unwrap();
        assert_abs_diff_eq!(w, 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn higher_dimension_needs_equal_sizes() {
        let a = ParticleEnsemble::new(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = ParticleEnsemble::new(2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            wasserstein(Order::W2, &a, &b),
            Err(Error::SizeMismatch { .. })
        ));
        assert!(matches!(
            wasserstein(Order::W2, &a, &ens(&[1.0, 2.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn assignment_w2_in_two_dimensions() {
        let a = ParticleEnsemble::new(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let b = ParticleEnsemble::new(2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(wasserstein(Order::W2, &a, &b).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn pushforward_examples() {
        let a = ens(&[1.0, 2.0]);
        let id = pushforward(&a, |x| x.to_vec()).unwrap();
        assert_eq!(id.seconds(), &[1.0, 2.0]);
        let zero = pushforward(&a, |_| vec![0.0]).unwrap();
        assert_eq!(zero.seconds(), &[0.0, 0.0]);
        let lin = pushforward(&ens(&[0.0, 2.0]), |x| vec![2.0 * x[0]]).unwrap();
        assert_eq!(lin.seconds(), &[0.0, 4.0]);
        assert_eq!(lin.first_marginal(), ens(&[0.0, 2.0]));
        assert!(pushforward(&a, |_| vec![f64::NAN]).is_err());
    }

    fn uniform(x_min: f64, n: usize, lo: f64, hi: f64) -> DensityGrid1d {
        let dx = 0.01;
        let values = (0..n)
            .map(|i| {
                let x = x_min + i as f64 * dx;
                if x >= lo - 1e-12 && x <= hi + 1e-12 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        DensityGrid1d::new(x_min, dx, values).unwrap()
    }

    #[test]
    fn mixture_endpoints() {
        let m1 = DensityGrid1d::gaussian(-5.0, 5.0, 101, 0.0, 1.0).unwrap();
        let m2 = DensityGrid1d::gaussian(-5.0, 5.0, 101, 1.0, 0.5).unwrap();
        assert_eq!(mixture_interpolate(&m1, &m2, 1.0).unwrap(), m1);
        assert_eq!(mixture_interpolate(&m1, &m2, 0.0).unwrap(), m2);
        let same = mixture_interpolate(&m1, &m1, 0.37).unwrap();
        for (a, b) in same.values().iter().zip(m1.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let other = DensityGrid1d::gaussian(-5.0, 5.0, 102, 0.0, 1.0).unwrap();
        assert!(matches!(
            mixture_interpolate(&m1, &other, 0.5),
            Err(Error::GridMismatch)
        ));
    }

    #[test]
    fn velocity_of_disjoint_uniforms() {
        // Grid on [-0.5, 2.5] with spacing 0.01; node 150 is x = 1.
        let m1 = uniform(-0.5, 301, 0.0, 1.0);
        let m2 = uniform(-0.5, 301, 1.0, 2.0);
        let v = geodesic_velocity_1d(&m1, &m2, 0.0, 150..151).unwrap();
        // m2(1) = 1/mass, F1(1) = 1 - (half cell at the edge), F2(1) = half cell.
        let f1 = m1.cumulative()[150];
        let f2 = m2.cumulative()[150];
        assert_abs_diff_eq!(v[0], (f2 - f1) / m2.values()[150], epsilon = 1e-14);
        assert_abs_diff_eq!(v[0], -1.0, epsilon = 2e-2);
        // Vacuum at x = -0.5 is refused.
        assert!(matches!(
            geodesic_velocity_1d(&m1, &m2, 0.0, 0..1),
            Err(Error::DensityFloor { .. })
        ));
    }

    #[test]
    fn stationary_path_has_zero_velocity() {
        let m = DensityGrid1d::gaussian(-4.0, 4.0, 81, 0.0, 1.0).unwrap();
        let v = geodesic_velocity_1d(&m, &m, 0.3, 10..70).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn velocity_satisfies_discrete_continuity() {
        // Flux balance on the trapezoid control volumes: (m1 - m2) at node i
        // against the centered difference of m_t v = F2 - F1.
        for &n in &[201usize, 401] {
            let m1 = DensityGrid1d::gaussian(-6.0, 6.0, n, 0.0, 1.0).unwrap();
            let m2 = DensityGrid1d::gaussian(-6.0, 6.0, n, 0.5, 1.2).unwrap();
            let t = 0.5;
            let v = geodesic_velocity_1d(&m1, &m2, t, 0..n).unwrap();
            let mt = mixture_interpolate(&m1, &m2, t).unwrap();
            let flux: Vec<f64> = v.iter().zip(mt.values()).map(|(a, b)| a * b).collect();
            let dx = m1.dx();
            let mut worst: f64 = 0.0;
            for i in 1..n - 1 {
                let dmdt = m1.values()[i] - m2.values()[i];
                let div = (flux[i + 1] - flux[i - 1]) / (2.0 * dx);
                worst = worst.max((dmdt + div).abs());
            }
            assert!(worst < 0.05 * dx, "n = {n}: residual {worst}");
        }
    }

    #[test]
    fn independent_copy_is_seeded() {
        let a = ens(&[1.0, 2.0, 3.0]);
        assert_eq!(independent_copy(&a, 7), independent_copy(&a, 7));
        let dirac = ens(&[4.2]);
        assert_eq!(independent_copy(&dirac, 123), dirac);
        // Replay the stream by hand.
        let mut g = rng::stream(11, 0);
        let expect: Vec<f64> = (0..3).map(|_| a.as_slice()[g.gen_range(0..3)]).collect();
        assert_eq!(independent_copy(&a, 11).as_slice(), expect.as_slice());
    }

    #[test]
    fn quantile_projection_preserves_mean() {
        let m = DensityGrid1d::gaussian(-8.0, 8.0, 401, 0.3, 1.0).unwrap();
        let p = m.quantile_projection(256).unwrap();
        assert_abs_diff_eq!(p.mean()[0], m.mean(), epsilon = 1e-12);
        let xs = p.as_slice();
        assert!(xs.windows(2).all(|w| w[0] <= w[1]));
        // Slab barycenters lose the within-slab variance only.
        assert!(p.variance()[0] < m.variance() && p.variance()[0] > 0.98);
    }

    #[test]
    fn gaussian_moments_are_accurate() {
        let m = DensityGrid1d::gaussian(-8.0, 8.0, 161, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(m.mass(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m.mean(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m.variance(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn csv_round_trip() {
        let a = ParticleEnsemble::new(2, vec![0.1, -2.0, 3.5, 1e-7]).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(ParticleEnsemble::read_csv(buf.as_slice()).unwrap(), a);

        let j = JointEnsemble::from_pairs_1d(&[(1.0, 2.0), (-0.25, 0.5)]).unwrap();
        let mut buf = Vec::new();
        j.write_csv(&mut buf).unwrap();
        assert_eq!(JointEnsemble::read_csv(buf.as_slice()).unwrap(), j);

        let m = DensityGrid1d::gaussian(-3.0, 3.0, 31, 0.0, 1.0).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = DensityGrid1d::read_csv(buf.as_slice()).unwrap();
        for (a, b) in back.values().iter().zip(m.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }
}
