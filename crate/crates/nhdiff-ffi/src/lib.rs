//! C interface to `nhdiff`.
//!
//! Objects cross the boundary as opaque handles created by a `*_new`/`*_parse`
//! function and released with the matching `*_free`. Every fallible function
//! returns an [`NhdiffStatus`]; on failure, [`nhdiff_last_error`] describes the
//! most recent error on the calling thread. Tensors are written row-major:
//! `out[(a * 4 + b) * 4 + c]` holds component `[a][b][c]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nhdiff::checks;
use nhdiff::cli::{self, RunConfig, RunOutput};
use nhdiff::field::DerivativeMode;
use nhdiff::geometry::{self, ChartPoint, MetricSpec, Tensor3};
use nhdiff::Error;

/// Result of a C-callable function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NhdiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed or invalid configuration.
    Config = 3,
    InvalidInput = 4,
    /// Degenerate metric, non-convergence, instability or another numerical failure.
    Numerical = 5,
    Io = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// How coefficient derivatives are evaluated.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NhdiffDerivatives {
    Analytic = 0,
    FiniteDifference = 1,
    CrossCheck = 2,
}

impl From<NhdiffDerivatives> for DerivativeMode {
    fn from(d: NhdiffDerivatives) -> Self {
        match d {
            NhdiffDerivatives::Analytic => DerivativeMode::Analytic,
            NhdiffDerivatives::FiniteDifference => DerivativeMode::FiniteDifference,
            NhdiffDerivatives::CrossCheck => DerivativeMode::CrossCheck,
        }
    }
}

/// A metric in N-adapted form.
pub struct NhdiffMetric {
    spec: MetricSpec,
}

/// A validated run configuration.
pub struct NhdiffConfig {
    cfg: RunConfig,
}

/// Report and artifacts of a finished run.
pub struct NhdiffRun {
    out: RunOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn status_of(e: &Error) -> NhdiffStatus {
    match e {
        Error::Config(_) => NhdiffStatus::Config,
        Error::InvalidInput(_) => NhdiffStatus::InvalidInput,
        Error::Io(_) => NhdiffStatus::Io,
        _ => NhdiffStatus::Numerical,
    }
}

/// Runs `f`, recording its error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (NhdiffStatus, String)>) -> NhdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NhdiffStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            set_error(format!("panic: {}", msg.unwrap_or_default()));
            NhdiffStatus::Panic
        }
    }
}

fn lib(e: Error) -> (NhdiffStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (NhdiffStatus, String) {
    (NhdiffStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (NhdiffStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|e| (NhdiffStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (NhdiffStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null if none failed yet.
///
/// The string stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nhdiff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nhdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer returned by an `nhdiff_*` function documented as
/// caller-owned, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nhdiff_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Flat metric `diag(1, 1, -1, 1)` with vanishing N-connection.
#[no_mangle]
pub extern "C" fn nhdiff_metric_new_flat() -> *mut NhdiffMetric {
    Box::into_raw(Box::new(NhdiffMetric { spec: MetricSpec::flat() }))
}

/// Builds a metric from the JSON `metric` section of a run configuration.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer to writable
/// storage for one handle. On success `*out` owns a handle to release with
/// [`nhdiff_metric_free`]; on failure `*out` is left untouched.
#[no_mangle]
pub unsafe extern "C" fn nhdiff_metric_from_json(json: *const c_char, derivatives: NhdiffDerivatives, out: *mut *mut NhdiffMetric) -> NhdiffStatus {
    guard(|| {
        let s = text(json, "json")?;
        let slot = out_ptr(out, "out")?;
        let m = cli::parse_metric(s).map_err(|errs| (NhdiffStatus::Config, errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")))?;
        *slot = Box::into_raw(Box::new(NhdiffMetric { spec: m.spec(derivatives.into()) }));
        Ok(())
    })
}

/// # Safety
/// `metric` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn nhdiff_metric_free(metric: *mut NhdiffMetric) {
    if !metric.is_null() {
        drop(Box::from_raw(metric));
    }
}

fn write_tensor(t: &Tensor3, out: &mut [f64]) {
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                out[(a * 4 + b) * 4 + c] = t[a][b][c];
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Quantity {
    Connection,
    Torsion,
    Distortion,
    LeviCivita,
}

unsafe fn tensor_query(metric: *const NhdiffMetric, u: *const f64, out: *mut f64, q: Quantity) -> NhdiffStatus {
    guard(|| {
        let m = metric.as_ref().ok_or_else(|| null("metric"))?;
        if u.is_null() {
            return Err(null("u"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let coords: [f64; 4] = std::slice::from_raw_parts(u, 4).try_into().expect("four coordinates");
        let p = ChartPoint::from_coords(coords).map_err(lib)?;
        let t = match q {
            Quantity::Connection => geometry::canonical_dconnection(&m.spec, &p).map(|c| c.gamma),
            Quantity::Torsion => geometry::torsion(&m.spec, &p),
            Quantity::Distortion => geometry::distortion(&m.spec, &p),
            Quantity::LeviCivita => geometry::levi_civita(&m.spec, &p),
        }
        .map_err(lib)?;
        write_tensor(&t, std::slice::from_raw_parts_mut(out, 64));
        Ok(())
    })
}

/// Canonical d-connection coefficients in the N-adapted frame at chart point `u`.
///
/// # Safety
/// `metric` must be a live handle, `u` must point to 4 readable doubles
/// `(x1, x2, t, y)` and `out` to 64 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn nhdiff_metric_connection(metric: *const NhdiffMetric, u: *const f64, out: *mut f64) -> NhdiffStatus {
    tensor_query(metric, u, out, Quantity::Connection)
}

/// Torsion of the canonical d-connection, `out[(a * 4 + b) * 4 + c] = T^a_{bc}`.
///
/// # Safety
/// Same contract as [`nhdiff_metric_connection`].
#[no_mangle]
pub unsafe extern "C" fn nhdiff_metric_torsion(metric: *const NhdiffMetric, u: *const f64, out: *mut f64) -> NhdiffStatus {
    tensor_query(metric, u, out, Quantity::Torsion)
}

/// Distortion: Levi-Civita minus canonical d-connection.
///
/// # Safety
/// Same contract as [`nhdiff_metric_connection`].
#[no_mangle]
pub unsafe extern "C" fn nhdiff_metric_distortion(metric: *const NhdiffMetric, u: *const f64, out: *mut f64) -> NhdiffStatus {
    tensor_query(metric, u, out, Quantity::Distortion)
}

/// Levi-Civita connection in the N-adapted frame.
///
/// # Safety
/// Same contract as [`nhdiff_metric_connection`].
#[no_mangle]
pub unsafe extern "C" fn nhdiff_metric_levi_civita(metric: *const NhdiffMetric, u: *const f64, out: *mut f64) -> NhdiffStatus {
    tensor_query(metric, u, out, Quantity::LeviCivita)
}

// ---------------------------------------------------------------------------
// Runs

/// Parses and validates a run configuration.
///
/// On a schema failure the last error lists every problem, separated by `"; "`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer to writable
/// storage for one handle; release the handle with [`nhdiff_config_free`].
#[no_mangle]
pub unsafe extern "C" fn nhdiff_config_parse(json: *const c_char, out: *mut *mut NhdiffConfig) -> NhdiffStatus {
    guard(|| {
        let s = text(json, "json")?;
        let slot = out_ptr(out, "out")?;
        let cfg = cli::load_config(s).map_err(lib)?;
        *slot = Box::into_raw(Box::new(NhdiffConfig { cfg }));
        Ok(())
    })
}

/// Replaces the configured master seed.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhdiff_config_set_seed(config: *mut NhdiffConfig, seed: u64) -> NhdiffStatus {
    guard(|| {
        out_ptr(config, "config")?.cfg.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn nhdiff_config_free(config: *mut NhdiffConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Executes a configuration on `threads` workers (`0` uses the default pool).
///
/// A run whose checks fail still returns `Ok`; see [`nhdiff_run_exit_code`].
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer to writable storage for
/// one handle; release the result with [`nhdiff_run_free`].
#[no_mangle]
pub unsafe extern "C" fn nhdiff_run(config: *const NhdiffConfig, threads: usize, out: *mut *mut NhdiffRun) -> NhdiffStatus {
    guard(|| {
        let c = config.as_ref().ok_or_else(|| null("config"))?;
        let slot = out_ptr(out, "out")?;
        let pool = if threads == 0 { None } else { Some(threads) };
        let result = cli::with_threads(pool, || cli::run(&c.cfg)).map_err(lib)?.map_err(lib)?;
        *slot = Box::into_raw(Box::new(NhdiffRun { out: result }));
        Ok(())
    })
}

/// `0` if every configured check passed, `3` otherwise; `-1` for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhdiff_run_exit_code(run: *const NhdiffRun) -> i32 {
    run.as_ref().map_or(-1, |r| r.out.report.exit_code())
}

/// The run report as JSON; caller-owned, release with [`nhdiff_string_free`].
/// Returns null on failure.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhdiff_run_report_json(run: *const NhdiffRun) -> *mut c_char {
    let mut s = ptr::null_mut();
    let status = guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let json = nhdiff::io::to_json(&r.out.report).map_err(lib)?;
        s = CString::new(json).map_err(|e| (NhdiffStatus::Io, e.to_string()))?.into_raw();
        Ok(())
    });
    if status == NhdiffStatus::Ok {
        s
    } else {
        ptr::null_mut()
    }
}

/// Writes the artifacts and `report.json` into directory `dir`.
///
/// # Safety
/// `run` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nhdiff_run_write(run: *const NhdiffRun, dir: *const c_char) -> NhdiffStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let d = text(dir, "dir")?;
        r.out.write(Path::new(d)).map_err(lib)
    })
}

/// # Safety
/// `run` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn nhdiff_run_free(run: *mut NhdiffRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

// ---------------------------------------------------------------------------
// Acceptance checks

/// Number of named acceptance checks.
#[no_mangle]
pub extern "C" fn nhdiff_check_count() -> usize {
    checks::CHECKS.len()
}

/// Runs one acceptance check by name or number and stores whether it passed.
///
/// # Safety
/// `name` must be a NUL-terminated string and `passed` a valid pointer to one
/// writable `bool`.
#[no_mangle]
pub unsafe extern "C" fn nhdiff_check_run(name: *const c_char, seed: u64, passed: *mut bool) -> NhdiffStatus {
    guard(|| {
        let n = text(name, "name")?;
        let slot = out_ptr(passed, "passed")?;
        let r = checks::run_check(n, seed).map_err(lib)?;
        if !r.pass {
            set_error(r.summary.clone());
        }
        *slot = r.pass;
        Ok(())
    })
}
