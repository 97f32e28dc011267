//! Experiment driver for `mfgc-core`: configuration, subcommands, artifact
//! bookkeeping and the acceptance suite.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 on a
//! configuration or solver error.

pub mod artifacts;
pub mod config;
pub mod criteria;
pub mod ops;
pub mod suite;

use std::io::Write;
use std::time::Instant;

use anyhow::Result;

use artifacts::{Manifest, Outputs, Status, Timing, Verdict, ARTIFACT_VERSION};
use config::RunConfig;
use criteria::Level;

/// Subcommands that operate on a [`RunConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operation {
    CheckMonotonicity,
    Solve,
    Value,
    Residual,
    Propagate,
    Lipschitz,
    Semigroup,
    Suite(Level),
}

impl Operation {
    pub fn name(self) -> String {
        match self {
            Operation::CheckMonotonicity => "check-monotonicity".into(),
            Operation::Solve => "solve".into(),
            Operation::Value => "value".into(),
            Operation::Residual => "residual".into(),
            Operation::Propagate => "propagate".into(),
            Operation::Lipschitz => "lipschitz".into(),
            Operation::Semigroup => "semigroup".into(),
            Operation::Suite(l) => format!("suite {}", l.as_str()),
        }
    }
}

/// Result of [`run`].
#[derive(Debug)]
pub struct RunOutcome {
    pub status: Status,
    pub verdicts: Vec<Verdict>,
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.status.exit_code()
    }
}

fn dispatch(op: Operation, cfg: &RunConfig, out: &mut Outputs, log: &mut dyn Write) -> Result<(Vec<Verdict>, Vec<Timing>)> {
    let verdicts = match op {
        Operation::CheckMonotonicity => ops::check_monotonicity(cfg, out)?,
        Operation::Solve => ops::solve(cfg, out)?,
        Operation::Value => ops::value(cfg, out)?,
        Operation::Residual => ops::residual(cfg, out)?,
        Operation::Propagate => ops::propagate(cfg, out)?,
        Operation::Lipschitz => ops::lipschitz(cfg, out)?,
        Operation::Semigroup => ops::semigroup(cfg, out)?,
        Operation::Suite(level) => {
            let s = suite::run(level, &cfg.suite, cfg.seed, out, log)?;
            return Ok((s.verdicts(), s.timings()));
        }
    };
    for v in &verdicts {
        writeln!(
            log,
            "{} {}{}",
            if v.pass { "PASS" } else { "FAIL" },
            v.check,
            match (v.value, v.tolerance) {
                (Some(x), Some(t)) => format!(": {x:.6e} (tolerance {t:.1e})"),
                (Some(x), None) => format!(": {x:.6e}"),
                _ => String::new(),
            }
        )?;
    }
    Ok((verdicts, Vec::new()))
}

/// Run `op` with `cfg`, writing outputs and the manifest into
/// `cfg.output_dir`. The manifest is written even when the run fails.
pub fn run(op: Operation, cfg: &RunConfig, log: &mut dyn Write) -> RunOutcome {
    let start = Instant::now();
    let mut out = match Outputs::create(&cfg.output_dir) {
        Ok(o) => o,
        Err(e) => {
            return RunOutcome {
                status: Status::Error,
                verdicts: Vec::new(),
                error: Some(format!("{e:#}")),
            }
        }
    };
    let result = dispatch(op, cfg, &mut out, log);
    let (status, verdicts, timings, error) = match result {
        Ok((v, t)) => {
            let status = if v.iter().all(|v| v.pass) { Status::Pass } else { Status::Fail };
            (status, v, t, None)
        }
        Err(e) => (Status::Error, Vec::new(), Vec::new(), Some(format!("{e:#}"))),
    };
    let manifest = Manifest {
        artifact_version: ARTIFACT_VERSION.into(),
        command: op.name(),
        config: serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
        seed: cfg.seed,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        status,
        exit_code: status.exit_code(),
        error: error.clone(),
        verdicts: verdicts.clone(),
        timings,
        files: out.files().to_vec(),
    };
    let error = match manifest.write(out.dir()) {
        Ok(()) => error,
        Err(e) => Some(format!("{}writing manifest: {e:#}", error.map(|s| s + "; ").unwrap_or_default())),
    };
    RunOutcome {
        status: if error.is_some() { Status::Error } else { status },
        verdicts,
        error,
    }
}

/// Manifest for a run that failed before a configuration existed.
pub fn write_error_manifest(dir: &std::path::Path, command: &str, error: &str) -> Result<()> {
    Manifest {
        artifact_version: ARTIFACT_VERSION.into(),
        command: command.into(),
        config: serde_json::Value::Null,
        seed: 0,
        wall_clock_seconds: 0.0,
        status: Status::Error,
        exit_code: Status::Error.exit_code(),
        error: Some(error.into()),
        verdicts: Vec::new(),
        timings: Vec::new(),
        files: Vec::new(),
    }
    .write(dir)
}
