//! Acceptance-suite runner. Failures are collected rather than aborting the
//! run. Determinism is checked by rerunning the selected criteria into a
//! scratch directory and comparing every CSV/JSON artifact byte for byte.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use anyhow::{bail, Result};
use serde::Serialize;

use crate::artifacts::{Outputs, Timing, Verdict};
use crate::config::SuiteSettings;
use crate::criteria::{Ctx, Level, Measured, CRITERIA, DETERMINISM_ID, DETERMINISM_NAME};

/// Reproducible part of a criterion's outcome (no timings).
#[derive(Debug, Clone, Serialize)]
pub struct CriterionRecord {
    pub id: u32,
    pub name: String,
    pub level: Level,
    pub tolerance_scale: f64,
    pub pass: bool,
    pub summary: String,
    pub error: Option<String>,
    pub checks: Vec<Verdict>,
}

/// One summary line: the record plus timing against the budget.
#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub record: CriterionRecord,
    pub seconds: f64,
    pub budget: f64,
}

impl SuiteRow {
    pub fn within_budget(&self) -> bool {
        self.seconds <= self.budget
    }

    /// Numerical checks pass and the runtime is within budget.
    pub fn pass(&self) -> bool {
        self.record.pass && self.within_budget()
    }

    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} {:<30} {:>8.1} s / {:>5.0} s  {}",
            self.record.id,
            if self.pass() { "PASS" } else { "FAIL" },
            self.record.name,
            self.seconds,
            self.budget,
            match &self.record.error {
                Some(e) => format!("error: {e}"),
                None if !self.within_budget() => format!("over budget; {}", self.record.summary),
                None => self.record.summary.clone(),
            }
        )
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    id: u32,
    name: &'a str,
    level: &'a str,
    tolerance_scale: f64,
    pass: bool,
    summary: &'a str,
}

pub struct SuiteOutcome {
    pub rows: Vec<SuiteRow>,
}

impl SuiteOutcome {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(SuiteRow::pass)
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        self.rows
            .iter()
            .map(|r| {
                Verdict::new(
                    format!("criterion {}: {}", r.record.id, r.record.name),
                    r.pass(),
                    Some(r.seconds),
                    Some(r.budget),
                    r.record.error.clone().unwrap_or_else(|| r.record.summary.clone()),
                )
            })
            .collect()
    }

    pub fn timings(&self) -> Vec<Timing> {
        self.rows
            .iter()
            .map(|r| Timing {
                stage: format!("criterion {}", r.record.id),
                seconds: r.seconds,
                budget_seconds: Some(r.budget),
            })
            .collect()
    }
}

fn scale_for(settings: &SuiteSettings, id: u32) -> f64 {
    settings.tolerance_scale.get(&id.to_string()).copied().unwrap_or(1.0)
}

/// Budgets are stated for the full level; the fast level must fit the whole
/// suite in about two minutes, so each criterion gets a quarter of its
/// budget, at least five seconds.
fn budget(level: Level, full: f64) -> f64 {
    match level {
        Level::Full => full,
        Level::Fast => (full / 4.0).max(5.0),
    }
}

fn run_one(id: u32, ctx: &Ctx, out: &mut Outputs) -> (CriterionRecord, f64, f64) {
    let c = CRITERIA.iter().find(|c| c.id == id).expect("known criterion");
    let start = Instant::now();
    let res: Result<Measured> = (c.run)(ctx, out);
    let seconds = start.elapsed().as_secs_f64();
    let record = match res {
        Ok(m) => CriterionRecord {
            id,
            name: c.name.into(),
            level: ctx.level,
            tolerance_scale: ctx.scale,
            pass: m.checks.iter().all(|v| v.pass),
            summary: m.summary,
            error: None,
            checks: m.checks,
        },
        Err(e) => CriterionRecord {
            id,
            name: c.name.into(),
            level: ctx.level,
            tolerance_scale: ctx.scale,
            pass: false,
            summary: String::new(),
            error: Some(format!("{e:#}")),
            checks: Vec::new(),
        },
    };
    (record, seconds, budget(ctx.level, c.budget))
}

fn validate(settings: &SuiteSettings) -> Result<Vec<u32>> {
    let known: Vec<u32> = CRITERIA.iter().map(|c| c.id).chain([DETERMINISM_ID]).collect();
    for id in &settings.only {
        if !known.contains(id) {
            bail!("unknown criterion {id}; criteria are numbered 1 to {DETERMINISM_ID}");
        }
    }
    for (k, &v) in &settings.tolerance_scale {
        let ok = k.parse::<u32>().map(|id| known.contains(&id)).unwrap_or(false);
        if !ok {
            bail!("suite.tolerance_scale has unknown criterion key {k:?}");
        }
        if !(v > 0.0 && v.is_finite()) {
            bail!("suite.tolerance_scale.{k} must be a positive number");
        }
    }
    Ok(if settings.only.is_empty() { known } else { settings.only.clone() })
}

fn is_artifact(name: &str) -> bool {
    name.ends_with(".csv") || name.ends_with(".json")
}

/// Run the selected criteria, writing per-criterion reports and the summary
/// tables into `out`. Progress lines go to `log`.
pub fn run(level: Level, settings: &SuiteSettings, seed: u64, out: &mut Outputs, log: &mut dyn Write) -> Result<SuiteOutcome> {
    let selected = validate(settings)?;
    let numeric: Vec<u32> = selected.iter().copied().filter(|&id| id != DETERMINISM_ID).collect();
    let mut rows = Vec::new();
    for &id in &numeric {
        let ctx = Ctx {
            level,
            scale: scale_for(settings, id),
            seed,
        };
        let (record, seconds, budget) = run_one(id, &ctx, out);
        out.write_json(&format!("criterion_{id:02}.json"), &record)?;
        let row = SuiteRow { record, seconds, budget };
        writeln!(log, "{}", row.line())?;
        rows.push(row);
    }
    if selected.contains(&DETERMINISM_ID) {
        let row = determinism(level, settings, seed, &numeric, out)?;
        out.write_json(&format!("criterion_{DETERMINISM_ID:02}.json"), &row.record)?;
        writeln!(log, "{}", row.line())?;
        rows.push(row);
    }
    let summary: Vec<SummaryRow> = rows
        .iter()
        .map(|r| SummaryRow {
            id: r.record.id,
            name: &r.record.name,
            level: level.as_str(),
            tolerance_scale: r.record.tolerance_scale,
            pass: r.record.pass,
            summary: r.record.error.as_deref().unwrap_or(&r.record.summary),
        })
        .collect();
    out.write_csv("suite_summary.csv", &summary)?;
    let records: Vec<&CriterionRecord> = rows.iter().map(|r| &r.record).collect();
    out.write_json("suite_summary.json", &records)?;
    Ok(SuiteOutcome { rows })
}

/// Criteria rerun by the fast determinism check: one per code path
/// (transport, fixed point, probes, Monte-Carlo, value solver, grid solver),
/// leaving out the slow value-solver sweeps.
const FAST_RERUN: &[u32] = &[1, 2, 3, 4, 6, 9, 11];

/// Rerun `ids` (all numeric criteria when none ran) into scratch
/// directories and compare artifacts byte for byte with `out`, or with a
/// first scratch run when `out` holds none of them.
fn determinism(level: Level, settings: &SuiteSettings, seed: u64, ids: &[u32], out: &Outputs) -> Result<SuiteRow> {
    let start = Instant::now();
    let standalone = ids.is_empty();
    let mut ids: Vec<u32> = if standalone { CRITERIA.iter().map(|c| c.id).collect() } else { ids.to_vec() };
    if level == Level::Fast && ids.iter().any(|id| FAST_RERUN.contains(id)) {
        ids.retain(|id| FAST_RERUN.contains(id));
    }
    let rerun = |dir: &std::path::Path| -> Result<BTreeMap<String, String>> {
        let mut o = Outputs::create(dir)?;
        for &id in &ids {
            let ctx = Ctx {
                level,
                scale: scale_for(settings, id),
                seed,
            };
            let (record, _, _) = run_one(id, &ctx, &mut o);
            o.write_json(&format!("criterion_{id:02}.json"), &record)?;
        }
        Ok(o.files().iter().map(|f| (f.path.clone(), f.sha256.clone())).collect())
    };
    let scratch = std::env::temp_dir().join(format!("mfgc-lab-determinism-{}", std::process::id()));
    let result = (|| -> Result<(BTreeMap<String, String>, BTreeMap<String, String>)> {
        let second = rerun(&scratch.join("b"))?;
        let first = if standalone {
            rerun(&scratch.join("a"))?
        } else {
            out.files()
                .iter()
                .filter(|f| second.contains_key(&f.path))
                .map(|f| (f.path.clone(), f.sha256.clone()))
                .collect()
        };
        Ok((first, second))
    })();
    let _ = std::fs::remove_dir_all(&scratch);
    let (first, second) = result?;
    let mut differing: Vec<String> = second
        .iter()
        .filter(|(p, _)| is_artifact(p))
        .filter(|(p, h)| first.get(*p) != Some(h))
        .map(|(p, _)| p.clone())
        .collect();
    differing.sort();
    let compared = second.keys().filter(|p| is_artifact(p)).count();
    let pass = differing.is_empty() && compared > 0;
    let summary = if differing.is_empty() {
        format!("{compared} CSV/JSON artifacts byte-identical across reruns")
    } else {
        format!("{} of {compared} artifacts differ: {}", differing.len(), differing.join(", "))
    };
    let record = CriterionRecord {
        id: DETERMINISM_ID,
        name: DETERMINISM_NAME.into(),
        level,
        tolerance_scale: 1.0,
        pass,
        summary: summary.clone(),
        error: None,
        checks: vec![Verdict::new("byte-identical artifacts", pass, Some(differing.len() as f64), Some(0.0), summary)],
    };
    let full_budget: f64 = CRITERIA.iter().filter(|c| ids.contains(&c.id)).map(|c| c.budget).sum();
    let factor = if standalone { 2.0 } else { 1.0 };
    Ok(SuiteRow {
        record,
        seconds: start.elapsed().as_secs_f64(),
        budget: factor * budget(level, full_budget),
    })
}
