use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use mfgc_lab::config::{self, parse_override};
use mfgc_lab::criteria::Level;
use mfgc_lab::{run, write_error_manifest, Operation};

/// Numerical laboratory for mean field games of controls.
#[derive(Parser)]
#[command(name = "mfgc-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set grid.nx=400`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Registered model name.
    #[arg(long)]
    model: Option<String>,
    /// Initial law: `gaussian:mean,std`, `density:<csv>` or a particle CSV.
    #[arg(long)]
    mu0: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Scan the monotonicity gap functionals on sampled instances.
    CheckMonotonicity {
        #[command(flatten)]
        common: Common,
        /// Gap kind (repeatable); all kinds when omitted.
        #[arg(long)]
        kind: Vec<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Solve the equilibrium.
    Solve {
        #[command(flatten)]
        common: Common,
        /// `xmin,xmax,nx`.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        /// `t0,T,nt`.
        #[arg(long, allow_hyphen_values = true)]
        time: Option<String>,
        /// Common-noise intensity.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        particles: Option<usize>,
        /// `grid` or `particle`.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate V(t, x, mu0) and its x derivatives.
    Value {
        #[command(flatten)]
        common: Common,
        /// `t,x`.
        #[arg(long, allow_hyphen_values = true)]
        at: Option<String>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Master-equation residual by finite differences.
    Residual {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        t0: Option<f64>,
        #[arg(long)]
        particles: Option<usize>,
    },
    /// Monotonicity of V(t, ., .) along solved flows.
    Propagate {
        #[command(flatten)]
        common: Common,
        /// `LL` or `disp`.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        checkpoints: Option<usize>,
    },
    /// Lipschitz constant of d_x V in the measure argument.
    Lipschitz {
        #[command(flatten)]
        common: Common,
        /// Wasserstein order, 1 or 2.
        #[arg(long)]
        order: Option<u32>,
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Direct versus two-stage solve.
    Semigroup {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        t1: Option<f64>,
    },
    /// Acceptance suite.
    Suite {
        #[command(flatten)]
        common: Common,
        /// `fast` or `full`.
        #[arg(default_value = "fast")]
        name: String,
        /// Comma-separated criterion ids to run.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
    },
}

fn triple(s: &str, what: &str) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("{what} {s:?}"))?;
    if v.len() != 3 {
        bail!("{what} {s:?} needs three comma-separated numbers");
    }
    Ok((v[0], v[1], v[2]))
}

fn count(x: f64, what: &str) -> Result<Value> {
    if x < 1.0 || x.fract() != 0.0 {
        bail!("{what} must be a positive integer (got {x})");
    }
    Ok(Value::from(x as u64))
}

/// Operation plus the configuration overrides implied by the flags, applied
/// after the `--set` ones.
fn translate(cmd: Command) -> Result<(Operation, Common, Vec<(String, Value)>)> {
    let mut o: Vec<(String, Value)> = Vec::new();
    let mut put = |k: &str, v: Value| o.push((k.to_string(), v));
    let (op, common) = match cmd {
        Command::CheckMonotonicity { common, kind, trials } => {
            if !kind.is_empty() {
                put("monotonicity.kinds", Value::from(kind));
            }
            if let Some(t) = trials {
                put("monotonicity.trials", Value::from(t));
            }
            (Operation::CheckMonotonicity, common)
        }
        Command::Solve {
            common,
            grid,
            time,
            beta,
            particles,
            method,
        } => {
            if let Some(g) = grid {
                let (a, b, n) = triple(&g, "--grid")?;
                put("grid.x_min", Value::from(a));
                put("grid.x_max", Value::from(b));
                put("grid.nx", count(n, "nx")?);
            }
            if let Some(t) = time {
                let (a, b, n) = triple(&t, "--time")?;
                put("grid.t0", Value::from(a));
                put("grid.t_end", Value::from(b));
                put("grid.nt", count(n, "nt")?);
            }
            if let Some(b) = beta {
                put("model.params.beta", Value::from(b));
            }
            if let Some(p) = particles {
                put("solve.particles", Value::from(p));
            }
            if let Some(m) = method {
                put("solve.method", Value::from(m));
            }
            (Operation::Solve, common)
        }
        Command::Value { common, at, method } => {
            if let Some(a) = at {
                let (t, x) = a
                    .split_once(',')
                    .with_context(|| format!("--at {a:?} needs t,x"))?;
                put("value.t0", Value::from(t.trim().parse::<f64>().context("--at t")?));
                put("value.x", Value::from(x.trim().parse::<f64>().context("--at x")?));
            }
            if let Some(m) = method {
                put("value.method", Value::from(m));
            }
            (Operation::Value, common)
        }
        Command::Residual { common, t0, particles } => {
            if let Some(t) = t0 {
                put("residual.t0", Value::from(t));
            }
            if let Some(p) = particles {
                put("residual.particles", Value::from(p));
            }
            (Operation::Residual, common)
        }
        Command::Propagate {
            common,
            kind,
            pairs,
            checkpoints,
        } => {
            if let Some(k) = kind {
                put("propagate.kind", Value::from(k));
            }
            if let Some(p) = pairs {
                put("propagate.pairs", Value::from(p));
            }
            if let Some(c) = checkpoints {
                put("propagate.check.checkpoints", Value::from(c));
            }
            (Operation::Propagate, common)
        }
        Command::Lipschitz { common, order, pairs } => {
            if let Some(k) = order {
                put("lipschitz.order", Value::from(k));
            }
            if let Some(p) = pairs {
                put("lipschitz.pairs", Value::from(p));
            }
            (Operation::Lipschitz, common)
        }
        Command::Semigroup { common, t1 } => {
            if let Some(t) = t1 {
                put("semigroup.t1", Value::from(t));
            }
            (Operation::Semigroup, common)
        }
        Command::Suite { common, name, only } => {
            if !only.is_empty() {
                put("suite.only", Value::from(only));
            }
            (Operation::Suite(Level::parse(&name)?), common)
        }
    };
    let mut all: Vec<(String, Value)> = common.set.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
    if let Some(p) = &common.out {
        all.push(("output_dir".into(), Value::from(p.to_string_lossy().into_owned())));
    }
    if let Some(s) = common.seed {
        all.push(("seed".into(), Value::from(s)));
    }
    if let Some(m) = &common.model {
        all.push(("model.name".into(), Value::from(m.clone())));
    }
    if let Some(m) = &common.mu0 {
        all.push(("mu0".into(), Value::from(m.clone())));
    }
    all.extend(o);
    Ok((op, common, all))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MFGC_LAB_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("MFGC_LAB_THREADS must be a positive integer (got {v:?})"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let (op, common, overrides) = match translate(cli.command) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cfg = match config::load(common.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("error: {msg}");
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("mfgc-out"));
            if let Err(w) = write_error_manifest(&dir, &op.name(), &msg) {
                eprintln!("error: writing manifest: {w:#}");
            }
            return ExitCode::from(2);
        }
    };
    let outcome = run(op, &cfg, &mut std::io::stdout());
    if let Some(e) = &outcome.error {
        eprintln!("error: {e}");
    }
    ExitCode::from(outcome.exit_code() as u8)
}
