use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use nhdiff_ffi::*;

fn last_error() -> String {
    let p = nhdiff_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn flat_metric_has_no_connection() {
    let m = nhdiff_metric_new_flat();
    let u = [0.3, -0.2, 1.0, 0.5];
    let mut out = [1.0; 64];
    for f in [nhdiff_metric_connection, nhdiff_metric_torsion, nhdiff_metric_distortion, nhdiff_metric_levi_civita] {
        out.fill(1.0);
        assert_eq!(unsafe { f(m, u.as_ptr(), out.as_mut_ptr()) }, NhdiffStatus::Ok);
        assert!(out.iter().all(|&x| x == 0.0));
    }
    unsafe { nhdiff_metric_free(m) };
}

#[test]
fn json_metric_matches_the_library() {
    let json = CString::new(r#"{"g": [1, {"kind": "exp", "amp": 1, "rate": [0.5, 0, 0, 0]}], "n": [[{"kind": "poly", "terms": [{"coef": 0.2, "powers": [0, 1, 0, 0]}]}, 0], [0, 0]]}"#).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { nhdiff_metric_from_json(json.as_ptr(), NhdiffDerivatives::Analytic, &mut m) }, NhdiffStatus::Ok);
    let u = [0.1, 0.2, 0.3, 0.4];
    let mut gamma = [0.0; 64];
    let mut z = [0.0; 64];
    let mut lc = [0.0; 64];
    unsafe {
        assert_eq!(nhdiff_metric_connection(m, u.as_ptr(), gamma.as_mut_ptr()), NhdiffStatus::Ok);
        assert_eq!(nhdiff_metric_distortion(m, u.as_ptr(), z.as_mut_ptr()), NhdiffStatus::Ok);
        assert_eq!(nhdiff_metric_levi_civita(m, u.as_ptr(), lc.as_mut_ptr()), NhdiffStatus::Ok);
        nhdiff_metric_free(m);
    }
    for i in 0..64 {
        assert!((gamma[i] + z[i] - lc[i]).abs() < 1e-14);
    }
    // e_1 along x1: Gamma^1_{11} = d_1 g_1 / (2 g_1) = 0 for g_1 = 1; g_2 = e^{x1/2} gives
    // Gamma^1_{22} = -d_1 g_2 / (2 g_1) = -e^{x1/2} / 4.
    let idx = |a: usize, b: usize, c: usize| (a * 4 + b) * 4 + c;
    assert!((gamma[idx(0, 1, 1)] + (0.05f64).exp() / 4.0).abs() < 1e-14, "{}", gamma[idx(0, 1, 1)]);
}

#[test]
fn errors_are_reported_through_status_and_message() {
    let mut m = ptr::null_mut();
    let bad = CString::new(r#"{"g": [1, 1], "colour": 3}"#).unwrap();
    assert_eq!(unsafe { nhdiff_metric_from_json(bad.as_ptr(), NhdiffDerivatives::Analytic, &mut m) }, NhdiffStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("colour"));

    assert_eq!(unsafe { nhdiff_metric_from_json(ptr::null(), NhdiffDerivatives::Analytic, &mut m) }, NhdiffStatus::NullPointer);

    let degenerate = CString::new(r#"{"h": [0, 1], "signature": [1, 1, 0, 1]}"#).unwrap();
    assert_eq!(unsafe { nhdiff_metric_from_json(degenerate.as_ptr(), NhdiffDerivatives::FiniteDifference, &mut m) }, NhdiffStatus::Ok);
    let mut out = [0.0; 64];
    let u = [0.0; 4];
    assert_eq!(unsafe { nhdiff_metric_connection(m, u.as_ptr(), out.as_mut_ptr()) }, NhdiffStatus::Numerical);
    assert!(last_error().contains("degenerate"));
    assert_eq!(unsafe { nhdiff_metric_connection(m, ptr::null(), out.as_mut_ptr()) }, NhdiffStatus::NullPointer);
    unsafe { nhdiff_metric_free(m) };

    let invalid = [0xffu8, 0];
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { nhdiff_config_parse(invalid.as_ptr().cast(), &mut cfg) }, NhdiffStatus::InvalidUtf8);
}

#[test]
fn config_schema_errors_are_all_listed() {
    let text = CString::new(r#"{"command": "simulate", "typo": 1, "simulate": {"model": {"type": "special", "x0": [0,0,0,0], "v0": [0,0,0]}, "rho": -1, "dt": 0.01, "steps": 5}}"#).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { nhdiff_config_parse(text.as_ptr(), &mut cfg) }, NhdiffStatus::Config);
    let msg = last_error();
    assert!(msg.contains("typo: unknown field"), "{msg}");
    assert!(msg.contains("simulate.rho"), "{msg}");
}

#[test]
fn runs_are_deterministic_and_writable() {
    let text = CString::new(
        r#"{"command": "simulate", "simulate": {"model": {"type": "special", "x0": [0, 0, 0, 0], "v0": [0.1, 0, 0]},
            "rho": 1, "dt": 0.01, "steps": 50, "paths": 20, "save_every": 10}}"#,
    )
    .unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { nhdiff_config_parse(text.as_ptr(), &mut cfg) }, NhdiffStatus::Ok);
    assert_eq!(unsafe { nhdiff_config_set_seed(cfg, 5) }, NhdiffStatus::Ok);
    let mut reports = vec![];
    for threads in [1, 2] {
        let mut run = ptr::null_mut();
        assert_eq!(unsafe { nhdiff_run(cfg, threads, &mut run) }, NhdiffStatus::Ok);
        assert_eq!(unsafe { nhdiff_run_exit_code(run) }, 0);
        let s = unsafe { nhdiff_run_report_json(run) };
        assert!(!s.is_null());
        let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(s) }.to_str().unwrap()).unwrap();
        unsafe { nhdiff_string_free(s) };
        assert_eq!(v["seed"], 5);
        reports.push(v);
        if threads == 2 {
            let dir = tempfile::tempdir().unwrap();
            let d = CString::new(dir.path().to_str().unwrap()).unwrap();
            assert_eq!(unsafe { nhdiff_run_write(run, d.as_ptr()) }, NhdiffStatus::Ok);
            assert!(dir.path().join("paths.csv").exists());
            assert!(dir.path().join("report.json").exists());
        }
        unsafe { nhdiff_run_free(run) };
    }
    assert_eq!(reports[0]["artifacts"], reports[1]["artifacts"]);
    assert_eq!(reports[0]["config_sha256"], reports[1]["config_sha256"]);
    unsafe { nhdiff_config_free(cfg) };
    assert_eq!(unsafe { nhdiff_run_exit_code(ptr::null()) }, -1);
}

#[test]
fn checks_run_by_name() {
    assert_eq!(nhdiff_check_count(), 14);
    let mut passed = false;
    let name = CString::new("flat-nil").unwrap();
    assert_eq!(unsafe { nhdiff_check_run(name.as_ptr(), 2024, &mut passed) }, NhdiffStatus::Ok);
    assert!(passed);
    let name = CString::new("nope").unwrap();
    assert_eq!(unsafe { nhdiff_check_run(name.as_ptr(), 2024, &mut passed) }, NhdiffStatus::Config);
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(nhdiff_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = dir.join("include/nhdiff.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "nhdiff_metric_new_flat",
        "nhdiff_metric_from_json",
        "nhdiff_metric_connection",
        "nhdiff_config_parse",
        "nhdiff_run",
        "nhdiff_run_report_json",
        "nhdiff_check_run",
        "nhdiff_last_error",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "nhdiff.h"
int use(void) {
    NhdiffMetric *m = nhdiff_metric_new_flat();
    double u[4] = {0, 0, 0, 0}, out[64];
    NhdiffStatus s = nhdiff_metric_connection(m, u, out);
    nhdiff_metric_free(m);
    NhdiffConfig *c = NULL;
    NhdiffRun *r = NULL;
    if (nhdiff_config_parse("{\"command\": \"geometry-check\"}", &c) == NHDIFF_STATUS_OK &&
        nhdiff_run(c, 0, &r) == NHDIFF_STATUS_OK) {
        char *j = nhdiff_run_report_json(r);
        nhdiff_string_free(j);
        nhdiff_run_free(r);
    }
    nhdiff_config_free(c);
    bool passed = false;
    nhdiff_check_run("flat-nil", 1, &passed);
    return (int)s + nhdiff_run_exit_code(NULL) + (nhdiff_last_error() == NULL) + (int)nhdiff_check_count();
}
"#,
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg("-I")
            .arg(dir.join("include"))
            .arg(&src)
            .status()
            .unwrap_or_else(|e| panic!("{compiler} not runnable: {e}"));
        assert!(status.success(), "{compiler} rejected the header");
    }
}
