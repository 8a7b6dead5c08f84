use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nhdiff"));
    c.env_remove("NHDIFF_THREADS");
    c
}

fn demo(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run_config(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("--config").arg(config).arg("--out").arg(out).args(extra).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn flat_geometry_check_exits_zero_with_zero_connection() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_config(&demo("geometry-flat.json"), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("geometry.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "point,x1,x2,t,y,connection,torsion,anholonomy,distortion,levi_civita,metricity");
    for row in lines {
        let cells: Vec<&str> = row.split(',').collect();
        assert!(cells[5..].iter().all(|c| *c == "0"), "{row}");
    }
    let r = report(tmp.path());
    assert_eq!(r["command"], "geometry-check");
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
}

#[test]
fn negative_rho_is_one_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "bad.json",
        r#"{"command": "simulate", "simulate": {"model": {"type": "special", "x0": [0, 0, 0, 0], "v0": [0, 0, 0]}, "rho": -1, "dt": 0.01, "steps": 10}}"#,
    );
    let o = run_config(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].contains("simulate.rho"), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn malformed_json_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", "{\n  \"command\": \"solve\"\n  \"seed\": 1\n}");
    let o = run_config(&cfg, tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn family_a_demo_writes_residuals_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_config(&demo("family-a.json"), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS residuals"));
    let csv = std::fs::read_to_string(tmp.path().join("residuals.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 32 * 32 * 32);
    let r = report(tmp.path());
    let files: Vec<&str> = r["artifacts"].as_array().unwrap().iter().map(|a| a["file"].as_str().unwrap()).collect();
    assert_eq!(files, ["solution.csv", "residuals.csv", "solution.json"]);
    assert!(r["residuals"]["r2"]["max"].as_f64().unwrap() < 1e-6);
}

#[test]
fn ensemble_artifacts_are_identical_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "ens.json",
        r#"{"command": "ensemble",
            "grid": {"x1": {"start": 0, "end": 1, "points": 10}, "x2": {"start": 0, "end": 1, "points": 10}, "t": {"start": 0, "end": 1, "points": 10}},
            "solve": {"generator": {"family": "a", "upsilon2": 1, "h4_0": 20,
                      "phi": {"kind": "sum", "terms": [{"kind": "poly", "terms": [{"coef": 1, "powers": [0, 0, 1, 0]}]},
                                                        {"kind": "trig", "amp": 0.05, "freq": [1, 1, 0, 0], "func": "sin"}]}}},
            "ensemble": {"varpi": 0.02, "realizations": 8, "probes": [555, 111],
                         "tilde_source": {"random_source": {"amplitude": 1.0, "correlation_length": 0.3}}}}"#,
    );
    let dirs: Vec<PathBuf> = (0..3).map(|i| tmp.path().join(format!("run{i}"))).collect();
    for (d, threads) in dirs.iter().zip(["1", "1", "3"]) {
        let o = run_config(&cfg, d, &["--seed", "99", "--threads", threads]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let reports: Vec<Value> = dirs.iter().map(|d| report(d)).collect();
    for r in &reports[1..] {
        assert_eq!(r["config_sha256"], reports[0]["config_sha256"]);
        assert_eq!(r["artifacts"], reports[0]["artifacts"]);
    }
    assert_eq!(reports[0]["seed"], 99);
    for f in ["ensemble.json", "realizations.csv"] {
        let a = std::fs::read(dirs[0].join(f)).unwrap();
        assert_eq!(a, std::fs::read(dirs[2].join(f)).unwrap(), "{f}");
    }
    let o = run_config(&cfg, &tmp.path().join("other"), &["--seed", "100"]);
    assert_eq!(o.status.code(), Some(0));
    let other = report(&tmp.path().join("other"));
    assert_ne!(other["config_sha256"], reports[0]["config_sha256"]);
    assert_ne!(other["artifacts"], reports[0]["artifacts"]);
}

#[test]
fn failing_check_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "curved.json",
        r#"{"command": "geometry-check", "geometry": {"points": [[0.1, 0.2, 0.3, 0.4]], "expect_flat": true},
            "metric": {"g": [1, {"kind": "exp", "amp": 1, "rate": [0.5, 0, 0, 0]}]}}"#,
    );
    let o = run_config(&cfg, tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL flat"));
}

#[test]
fn numerical_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "degenerate.json",
        r#"{"command": "geometry-check", "metric": {"h": [0, 1], "signature": [1, 1, 0, 1]}}"#,
    );
    let o = run_config(&cfg, tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("degenerate"));
}

#[test]
fn named_checks_run_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin().args(["--check", "flat-nil", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("PASS [ 1] flat-nil"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("checks.json")).unwrap()).unwrap();
    assert_eq!(v[0]["name"], "flat-nil");
    assert_eq!(v[0]["pass"], true);

    let o = bin().args(["--check", "12", "--json"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["name"], "generator-duality");

    let o = bin().args(["--check", "no-such-check"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let o = bin().arg("--list-checks").output().unwrap();
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 14);
}

#[test]
fn configured_checks_join_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"command": "geometry-check", "checks": ["flat-nil", "wiener-statistics"]}"#);
    let o = run_config(&cfg, tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let names: Vec<String> = report(tmp.path())["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap().to_string()).collect();
    assert_eq!(names, ["metricity", "flat-nil", "wiener-statistics"]);
}

#[test]
fn every_bundled_config_parses_and_runs() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        let tmp = tempfile::tempdir().unwrap();
        let o = run_config(&p, tmp.path(), &[]);
        assert_eq!(o.status.code(), Some(0), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
        n += 1;
    }
    assert!(n >= 5);
}
