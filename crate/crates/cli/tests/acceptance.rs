//! Runs every acceptance criterion at the full level and prints one line per
//! criterion. `MFGC_ACCEPTANCE_LEVEL=fast` selects the coarse suite.

use std::io::Write;
use std::process::ExitCode;

use mfgc_lab::artifacts::Outputs;
use mfgc_lab::config::SuiteSettings;
use mfgc_lab::criteria::Level;
use mfgc_lab::suite;

fn main() -> ExitCode {
    // Ignore libtest arguments such as `--nocapture` or a filter.
    let level = match std::env::var("MFGC_ACCEPTANCE_LEVEL").as_deref() {
        Ok("fast") => Level::Fast,
        _ => Level::Full,
    };
    let dir = tempfile::tempdir().expect("scratch directory");
    let mut out = Outputs::create(dir.path()).expect("output directory");
    let mut stdout = std::io::stdout();
    writeln!(stdout, "\nacceptance suite ({})", level.as_str()).ok();
    let outcome = match suite::run(level, &SuiteSettings::default(), 0, &mut out, &mut stdout) {
        Ok(o) => o,
        Err(e) => {
            writeln!(stdout, "acceptance suite could not run: {e:#}").ok();
            return ExitCode::FAILURE;
        }
    };
    let passed = outcome.rows.iter().filter(|r| r.pass()).count();
    writeln!(stdout, "acceptance: {passed} of {} criteria passed\n", outcome.rows.len()).ok();
    if outcome.pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
