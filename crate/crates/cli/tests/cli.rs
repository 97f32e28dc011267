use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfgc-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_model_exits_2_and_lists_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["solve", "--model", "nope", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in mfgc_core::models::REGISTRY {
        assert!(err.contains(name), "{err}");
    }
    let m = manifest(dir.path());
    assert_eq!(m["status"], "error");
    assert!(m["error"].as_str().unwrap().contains("lq1d-coupled"));
}

#[test]
fn schema_errors_name_the_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = lab(&["solve", "--set", "grid.nxx=3", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nxx"), "{}", stderr(&o));

    let o = lab(&["solve", "--set", "grid.nx=\"many\"", "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("grid.nx"), "{}", stderr(&o));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\"model\": {\"name\": \"lq1d\", \"colour\": 1}}").unwrap();
    let o = lab(&["solve", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model"), "{}", stderr(&o));
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_mfgc-lab"))
        .args(["suite", "fast", "--only", "1"])
        .env("MFGC_LAB_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn monotonicity_verdicts_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = lab(&["check-monotonicity", "--model", "lq1d-disp", "--kind", "disp-U", "--trials", "50", "--out", out]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    // s < 0 makes the terminal cost anti-Lasry-Lions.
    let bad = lab(&["check-monotonicity", "--model", "lq1d-disp", "--kind", "LL-U", "--trials", "50", "--out", out]);
    assert_eq!(bad.status.code(), Some(1));
    let m = manifest(dir.path());
    assert_eq!(m["status"], "fail");
    assert_eq!(m["verdicts"][0]["check"], "LL-U");
}

fn small_solve(out: &Path) -> Output {
    lab(&[
        "solve",
        "--grid",
        "-7.5,8.5,60",
        "--time",
        "0,1,50",
        "--mu0",
        "gaussian:0.5,1",
        "--seed",
        "7",
        "--set",
        "solver.tol_out=1e-8",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn repeated_solves_are_byte_identical_and_inventoried() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let o = small_solve(d);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let ma = manifest(a.path());
    let files = ma["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["path"].as_str().unwrap()).collect();
    for expected in ["u.csv", "mu.csv", "rho.csv", "moments.csv", "residuals.csv", "solve.json"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    for f in files {
        let name = f["path"].as_str().unwrap();
        let bytes = fs::read(a.path().join(name)).unwrap();
        assert_eq!(bytes, fs::read(b.path().join(name)).unwrap(), "{name} differs");
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    assert_eq!(ma["files"], manifest(b.path())["files"]);
    let header = fs::read_to_string(a.path().join("u.csv")).unwrap();
    assert!(header.starts_with("t,x,u,du\n"));
}

#[test]
fn particle_solve_writes_moments() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&[
        "solve",
        "--method",
        "particle",
        "--particles",
        "500",
        "--time",
        "0,1,20",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("moments.csv")).unwrap();
    assert_eq!(text.lines().count(), 22);
}

#[test]
fn value_at_the_horizon_is_the_terminal_cost() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["value", "--at", "1,0.7", "--mu0", "gaussian:0.5,1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&fs::read(dir.path().join("value.json")).unwrap()).unwrap();
    // G = x^2/2 + 0.3 x m with m = 0.5.
    let g = 0.5 * 0.49 + 0.3 * 0.7 * 0.5;
    assert!((v["value"].as_f64().unwrap() - g).abs() < 1e-3, "{v}");
    assert!((v["gradient"].as_f64().unwrap() - (0.7 + 0.15)).abs() < 1e-3, "{v}");
}

#[test]
fn suite_collects_failures_and_tightening_fails_a_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = lab(&["suite", "fast", "--only", "1,2,3", "--out", out]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let summary = fs::read_to_string(dir.path().join("suite_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);

    let tight = lab(&["suite", "fast", "--only", "1,2,3", "--set", "suite.tolerance_scale={\"2\": 0.1}", "--out", out]);
    assert_eq!(tight.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&tight.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3, "{stdout}");
    assert!(lines[0].contains("PASS") && lines[2].contains("PASS"), "{stdout}");
    assert!(lines[1].contains("FAIL"), "{stdout}");
    let m = manifest(dir.path());
    assert_eq!(m["status"], "fail");
    assert_eq!(m["timings"].as_array().unwrap().len(), 3);
}

#[test]
fn suite_rejects_unknown_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["suite", "fast", "--only", "13", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown criterion"));
}
