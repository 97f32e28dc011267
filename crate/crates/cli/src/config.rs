//! Run configuration: a strict JSON schema plus dotted-path overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use mfgc_core::hamiltonian::{FixedPointSettings, ReducedHamiltonian};
use mfgc_core::measures::{DensityGrid1d, ParticleEnsemble};
use mfgc_core::models::{build_model, lq_parameters, LqModel};
use mfgc_core::monotonicity::SamplerConfig;
use mfgc_core::solver::{McConfig, ParticleConfig, SolverConfig};
use mfgc_core::value::{FdConfig, InitialLaw, Method, PropagationConfig, ValueConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            name: "lq1d-coupled".into(),
            params: BTreeMap::new(),
        }
    }
}

impl ModelSpec {
    pub fn hamiltonian(&self, fixed_point: FixedPointSettings) -> Result<ReducedHamiltonian> {
        let model = build_model(&self.name, &self.params)?;
        let rh = ReducedHamiltonian::new(model);
        let steps = rh.steps;
        Ok(rh.with_settings(fixed_point, steps)?)
    }

    /// LQ coefficients when the model has a closed form.
    pub fn lq(&self) -> Option<LqModel> {
        lq_parameters(&self.name, &self.params).ok()
    }
}

/// Space-time grid. Missing bounds default to `mean +- 8 std` of `mu0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSettings {
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub nx: usize,
    pub t0: f64,
    pub t_end: f64,
    pub nt: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            x_min: None,
            x_max: None,
            nx: 200,
            t0: 0.0,
            t_end: 1.0,
            nt: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSettings {
    pub method: Method,
    /// Particle method ensemble size.
    pub particles: usize,
    pub particle: ParticleConfig,
    /// Common-noise paths for the particle method when `beta > 0`.
    pub common_paths: usize,
    /// Time slices written to the CSV outputs, including both ends.
    pub output_slices: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            method: Method::Grid,
            particles: 20_000,
            particle: ParticleConfig::default(),
            common_paths: 1,
            output_slices: 101,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonotonicitySettings {
    /// Gap kinds to scan; all of them when empty.
    pub kinds: Vec<String>,
    pub trials: usize,
    pub tolerance: f64,
    pub particles: usize,
    pub independent_directions: bool,
}

impl Default for MonotonicitySettings {
    fn default() -> Self {
        Self {
            kinds: Vec::new(),
            trials: 200,
            tolerance: 1e-9,
            particles: 8,
            independent_directions: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueSettings {
    pub t0: f64,
    pub x: f64,
    pub method: Method,
    pub particles: usize,
    pub mc: McConfig,
    pub bandwidth: Option<f64>,
}

impl Default for ValueSettings {
    fn default() -> Self {
        Self {
            t0: 0.0,
            x: 1.0,
            method: Method::Grid,
            particles: 4000,
            mc: McConfig::default(),
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualSettings {
    pub t0: f64,
    /// Ensemble size drawn from `mu0` when it is not already a particle file.
    pub particles: usize,
    /// Evaluation points; `mean + {-1, -1/2, 0, 1/2, 1} std` when absent.
    pub xs: Option<Vec<f64>>,
    pub fd: FdConfig,
    pub tolerance: f64,
    /// Stencil-floor tolerance for the closed-form value (LQ models only).
    pub oracle_tolerance: f64,
}

impl Default for ResidualSettings {
    fn default() -> Self {
        Self {
            t0: 0.5,
            particles: 32,
            xs: None,
            fd: FdConfig::default(),
            tolerance: 5e-2,
            oracle_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagateSettings {
    pub kind: String,
    pub pairs: usize,
    pub t0: f64,
    pub check: PropagationConfig,
}

impl Default for PropagateSettings {
    fn default() -> Self {
        Self {
            kind: "disp".into(),
            pairs: 20,
            t0: 0.0,
            check: PropagationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzSettings {
    pub order: u32,
    pub pairs: usize,
    pub particles: usize,
    pub t0: f64,
    /// Allowed gap between the maximum ratio and `|B(t0)|` (LQ models only).
    pub tolerance: f64,
}

impl Default for LipschitzSettings {
    fn default() -> Self {
        Self {
            order: 2,
            pairs: 50,
            particles: 32,
            t0: 0.5,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemigroupSettings {
    /// Restart time; the midpoint of `[t0, T]` when absent.
    pub t1: Option<f64>,
    pub tolerance: f64,
}

impl Default for SemigroupSettings {
    fn default() -> Self {
        Self {
            t1: None,
            tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSettings {
    /// Criterion ids to run; all when empty.
    pub only: Vec<u32>,
    /// Per-criterion tolerance multipliers keyed by id; `0.1` tightens tenfold.
    pub tolerance_scale: BTreeMap<String, f64>,
}

/// Complete configuration of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSpec,
    /// Run seed; every stochastic stage derives its streams from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub grid: GridSettings,
    /// `gaussian:mean,std`, `density:<csv>` or a particle CSV path.
    pub mu0: String,
    pub solver: SolverConfig,
    pub fixed_point: FixedPointSettings,
    pub solve: SolveSettings,
    pub monotonicity: MonotonicitySettings,
    pub value: ValueSettings,
    pub residual: ResidualSettings,
    pub propagate: PropagateSettings,
    pub lipschitz: LipschitzSettings,
    pub semigroup: SemigroupSettings,
    pub suite: SuiteSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            seed: 0,
            output_dir: PathBuf::from("mfgc-out"),
            grid: GridSettings::default(),
            mu0: "gaussian:0.5,1".into(),
            solver: SolverConfig::default(),
            fixed_point: FixedPointSettings::default(),
            solve: SolveSettings::default(),
            monotonicity: MonotonicitySettings::default(),
            value: ValueSettings::default(),
            residual: ResidualSettings::default(),
            propagate: PropagateSettings::default(),
            lipschitz: LipschitzSettings::default(),
            semigroup: SemigroupSettings::default(),
            suite: SuiteSettings::default(),
        }
    }
}

/// Parse `key.path=value`; the value is read as JSON and falls back to a
/// plain string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("override {s:?} is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override {s:?} has an empty key segment");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                bail!("cannot set {key:?}: {:?} is not an object", parts[..i].join("."));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Load `path` (or the defaults), apply overrides in order and validate the
/// result against the schema. Errors name the offending key path.
pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        bail!("config root must be a JSON object");
    }
    for (k, v) in overrides {
        set_path(&mut root, k, v.clone())?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let at = e.path().to_string();
        anyhow!("invalid config at `{at}`: {}", e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        build_model(&self.model.name, &self.model.params)?;
        let g = &self.grid;
        if g.nx < 16 || g.nt == 0 || !(g.t_end > g.t0) || g.t0 < 0.0 {
            bail!("grid needs nx >= 16, nt >= 1 and 0 <= t0 < t_end");
        }
        self.solver.validate()?;
        self.initial()?;
        Ok(())
    }

    pub fn hamiltonian(&self) -> Result<ReducedHamiltonian> {
        self.model.hamiltonian(self.fixed_point)
    }

    pub fn dt(&self) -> f64 {
        (self.grid.t_end - self.grid.t0) / self.grid.nt as f64
    }

    /// The initial law named by `mu0`.
    pub fn initial(&self) -> Result<Initial> {
        Initial::parse(&self.mu0)
    }

    /// Spatial bounds: explicit ones, else `mean +- 8 std` of `mu0`.
    pub fn bounds(&self, init: &Initial) -> (f64, f64) {
        let (m, s) = init.moments();
        let half = mfgc_core::solver::grid::DOMAIN_STDS * s;
        (self.grid.x_min.unwrap_or(m - half), self.grid.x_max.unwrap_or(m + half))
    }

    /// `mu0` as a law for the value solver: densities on the configured grid,
    /// particle files as they are.
    pub fn initial_law(&self) -> Result<InitialLaw> {
        let init = self.initial()?;
        Ok(match init {
            Initial::Particles(p) => InitialLaw::Particles(p),
            other => InitialLaw::Density(self.density(&other)?),
        })
    }

    pub fn density(&self, init: &Initial) -> Result<DensityGrid1d> {
        match init {
            Initial::Gaussian { mean, std } => {
                let (lo, hi) = self.bounds(init);
                Ok(DensityGrid1d::gaussian(lo, hi, self.grid.nx, *mean, *std)?)
            }
            Initial::Density(d) => Ok(d.clone()),
            Initial::Particles(_) => bail!("mu0 is a particle ensemble, not a density"),
        }
    }

    /// `mu0` as `n` particles (samples of a density, or the file itself).
    pub fn particles(&self, n: usize, seed: u64) -> Result<ParticleEnsemble> {
        let init = self.initial()?;
        match init {
            Initial::Particles(p) => Ok(p),
            other => Ok(self.density(&other)?.sample(n, seed)?),
        }
    }

    pub fn value_config(&self) -> ValueConfig {
        ValueConfig {
            t_end: self.grid.t_end,
            nx: self.grid.nx,
            dt: self.dt(),
            solver: self.solver,
            bandwidth: self.value.bandwidth,
            particles: self.value.particles,
            particle: self.solve.particle,
            mc: McConfig {
                seed: self.seed,
                ..self.value.mc
            },
            seed: self.seed,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            family: "gaussian-pairs".into(),
            particles: self.monotonicity.particles,
            seed: self.seed,
            independent_directions: self.monotonicity.independent_directions,
        }
    }
}

/// Parsed `mu0` specification.
#[derive(Debug, Clone)]
pub enum Initial {
    Gaussian { mean: f64, std: f64 },
    Density(DensityGrid1d),
    Particles(ParticleEnsemble),
}

impl Initial {
    pub fn parse(spec: &str) -> Result<Self> {
        if let Some(rest) = spec.strip_prefix("gaussian:") {
            let v: Vec<f64> = rest
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("mu0 {spec:?}: expected gaussian:mean,std"))?;
            if v.len() != 2 || !v[0].is_finite() || !(v[1] > 0.0 && v[1].is_finite()) {
                bail!("mu0 {spec:?}: expected gaussian:mean,std with std > 0");
            }
            return Ok(Initial::Gaussian { mean: v[0], std: v[1] });
        }
        if let Some(path) = spec.strip_prefix("density:") {
            let f = std::fs::File::open(path).with_context(|| format!("opening density file {path}"))?;
            return Ok(Initial::Density(DensityGrid1d::read_csv(f)?));
        }
        let p = ParticleEnsemble::load(Path::new(spec)).with_context(|| format!("loading particle file {spec}"))?;
        Ok(Initial::Particles(p))
    }

    /// Mean and standard deviation.
    pub fn moments(&self) -> (f64, f64) {
        match self {
            Initial::Gaussian { mean, std } => (*mean, *std),
            Initial::Density(d) => (d.mean(), d.variance().sqrt()),
            Initial::Particles(p) => (p.mean()[0], p.variance()[0].sqrt()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_and_strings() {
        assert_eq!(parse_override("grid.nx=80").unwrap(), ("grid.nx".into(), Value::from(80)));
        assert_eq!(
            parse_override("mu0=gaussian:0,1").unwrap().1,
            Value::String("gaussian:0,1".into())
        );
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let o = vec![parse_override("grid.nxx=3").unwrap()];
        let err = load(None, &o).unwrap_err().to_string();
        assert!(err.contains("grid"), "{err}");
        assert!(err.contains("nxx"), "{err}");
    }

    #[test]
    fn defaults_validate() {
        let cfg = load(None, &[]).unwrap();
        assert_eq!(cfg.model.name, "lq1d-coupled");
        let (lo, hi) = cfg.bounds(&cfg.initial().unwrap());
        assert!((lo + 7.5).abs() < 1e-12 && (hi - 8.5).abs() < 1e-12);
    }
}
