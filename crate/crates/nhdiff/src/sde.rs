//! Wiener d-processes and stochastic integration.
//!
//! Increments have variance `rho * dt` per component. Itô systems step by
//! Euler–Maruyama, Stratonovich systems by the Heun predictor-corrector.
//! Frame-bundle and relativistic integrators are Stratonovich throughout.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::fd_step;
use crate::geometry::{ChartPoint, Mat4, MetricSpec, PointData, Tensor3};
use crate::io::{fmt17, Csv};
use crate::rng::NormalStream;
use crate::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

/// Chart slot of the timelike direction; the three others carry `v_hat`.
pub const TIME: usize = 2;
pub const SPATIAL: [usize; 3] = [0, 1, 3];
const MINKOWSKI: [f64; 4] = [1.0, 1.0, -1.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WienerConfig {
    pub rho: f64,
    pub dim: usize,
    pub seed: u64,
    pub dt: f64,
    pub steps: usize,
}

impl WienerConfig {
    pub fn new(rho: f64, dim: usize, seed: u64, dt: f64, steps: usize) -> Self {
        WienerConfig { rho, dim, seed, dt, steps }
    }

    /// `rho = 0` is accepted and switches the noise off.
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidInput(format!("rho must be finite and nonnegative, got {}", self.rho)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {}", self.dt)));
        }
        if self.dim == 0 || self.steps == 0 {
            return Err(Error::InvalidInput("dim and steps must be positive".into()));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        (self.rho * self.dt).sqrt()
    }
}

/// Increments `dW[step * dim + component]` of path `path_id`.
pub fn sample_wiener(cfg: &WienerConfig, path_id: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = vec![0.0; cfg.steps * cfg.dim];
    NormalStream::new(cfg.seed, path_id).fill(&mut out, cfg.scale());
    Ok(out)
}

/// Number of paths, first path id and recording cadence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    pub paths: usize,
    pub first_id: u64,
    /// Record every `save_every`-th step; `0` keeps only the endpoints.
    pub save_every: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { paths: 1, first_id: 0, save_every: 1 }
    }
}

impl Sampling {
    pub fn new(paths: usize) -> Self {
        Sampling { paths, ..Default::default() }
    }

    pub fn endpoints(paths: usize) -> Self {
        Sampling { paths, first_id: 0, save_every: 0 }
    }

    fn recorded(&self, steps: usize) -> Vec<usize> {
        let mut k: Vec<usize> = if self.save_every == 0 { vec![0] } else { (0..steps).step_by(self.save_every).collect() };
        k.push(steps);
        k
    }
}

/// Per-path running maxima of invariant violations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Monitors {
    /// `|eta v v + 1|` for relativistic paths.
    pub constraint: f64,
    /// Frame Gram error at any step.
    pub gram: f64,
    /// Frame Gram error right after re-orthonormalization.
    pub gram_reortho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub id: u64,
    /// Row-major `[record][column]`; rows after a failure are NaN.
    pub states: Vec<f64>,
    pub failure: Option<(usize, String)>,
    pub monitors: Monitors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub seed: u64,
    pub scheme: String,
    pub dt: f64,
    pub rho: f64,
    pub steps: usize,
    pub spec_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub columns: Vec<String>,
    pub tau: Vec<f64>,
    pub paths: Vec<Path>,
    pub meta: EnsembleMeta,
}

impl PathEnsemble {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn state(&self, path: usize, record: usize) -> &[f64] {
        let w = self.width();
        &self.paths[path].states[record * w..(record + 1) * w]
    }

    /// Final state of every path that did not fail.
    pub fn terminal_states(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let last = self.tau.len() - 1;
        (0..self.paths.len()).filter(move |&p| self.paths[p].failure.is_none()).map(move |p| self.state(p, last))
    }

    pub fn failed(&self) -> usize {
        self.paths.iter().filter(|p| p.failure.is_some()).count()
    }

    pub fn max_monitors(&self) -> Monitors {
        self.paths.iter().fold(Monitors::default(), |m, p| Monitors {
            constraint: m.constraint.max(p.monitors.constraint),
            gram: m.gram.max(p.monitors.gram),
            gram_reortho: m.gram_reortho.max(p.monitors.gram_reortho),
        })
    }

    /// `path_id, tau, columns...`, one row per recorded state.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["path_id", "tau"];
        header.extend(self.columns.iter().map(|s| s.as_str()));
        let mut c = Csv::new(&header);
        for p in 0..self.paths.len() {
            for (k, t) in self.tau.iter().enumerate() {
                let mut row = vec![*t];
                row.extend_from_slice(self.state(p, k));
                c.row_with_ids(&[self.paths[p].id], &row);
            }
        }
        c.finish()
    }

    pub fn metadata(&self) -> serde_json::Value {
        let m = self.max_monitors();
        serde_json::json!({
            "seed": self.meta.seed,
            "scheme": self.meta.scheme,
            "dt": fmt17(self.meta.dt),
            "rho": fmt17(self.meta.rho),
            "steps": self.meta.steps,
            "spec_hash": self.meta.spec_hash,
            "paths": self.paths.len(),
            "failed": self.failed(),
            "max_constraint": fmt17(m.constraint),
            "max_gram": fmt17(m.gram),
        })
    }
}

/// Runs `paths` independent copies of a one-step map; each path draws from its own stream.
fn simulate<F>(cfg: &WienerConfig, sampling: &Sampling, columns: Vec<String>, scheme: &str, init: &[f64], step: F) -> Result<PathEnsemble>
where
    F: Fn(usize, f64, &mut [f64], &[f64], &mut Monitors) -> Result<()> + Sync,
{
    cfg.validate()?;
    let width = columns.len();
    if init.len() != width {
        return Err(Error::InvalidInput(format!("initial state has {} entries, expected {width}", init.len())));
    }
    if sampling.paths == 0 {
        return Err(Error::InvalidInput("at least one path is required".into()));
    }
    let recorded = sampling.recorded(cfg.steps);
    let scale = cfg.scale();
    let paths = (0..sampling.paths as u64)
        .into_par_iter()
        .map(|p| {
            let id = sampling.first_id + p;
            let mut stream = NormalStream::new(cfg.seed, id);
            let mut state = init.to_vec();
            let mut dw = vec![0.0; cfg.dim];
            let mut states = Vec::with_capacity(recorded.len() * width);
            let mut monitors = Monitors::default();
            let mut failure = None;
            let mut next = 0;
            for k in 0..=cfg.steps {
                if recorded[next] == k {
                    states.extend_from_slice(&state);
                    next += 1;
                }
                if k == cfg.steps {
                    break;
                }
                stream.fill(&mut dw, scale);
                let r = step(k, k as f64 * cfg.dt, &mut state, &dw, &mut monitors);
                let bad = match r {
                    Err(e) => Some(e.to_string()),
                    Ok(()) if state.iter().any(|x| !x.is_finite()) => Some("non-finite state".to_string()),
                    Ok(()) => None,
                };
                if let Some(msg) = bad {
                    failure = Some((k + 1, msg));
                    states.resize(recorded.len() * width, f64::NAN);
                    break;
                }
            }
            Path { id, states, failure, monitors }
        })
        .collect();
    Ok(PathEnsemble {
        columns,
        tau: recorded.iter().map(|&k| k as f64 * cfg.dt).collect(),
        paths,
        meta: EnsembleMeta { seed: cfg.seed, scheme: scheme.into(), dt: cfg.dt, rho: cfg.rho, steps: cfg.steps, spec_hash: None },
    })
}

// ---------------------------------------------------------------------------
// Generic systems

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpretation {
    Ito,
    Stratonovich,
}

/// `(tau, u) -> vector`.
pub type StateFn = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// `du = sigma(tau, u) dW + b(tau, u) dtau` in either interpretation.
#[derive(Clone)]
pub struct SdeSystem {
    pub dim: usize,
    pub noise: usize,
    /// Row-major `sigma[alpha * noise + k]`.
    pub sigma: StateFn,
    pub drift: StateFn,
    /// Optional `d sigma[alpha][k] / du^beta`, laid out `[beta][alpha][k]`.
    pub sigma_grad: Option<StateFn>,
    pub interpretation: Interpretation,
}

impl SdeSystem {
    pub fn new(dim: usize, noise: usize, sigma: StateFn, drift: StateFn, interpretation: Interpretation) -> Self {
        SdeSystem { dim, noise, sigma, drift, sigma_grad: None, interpretation }
    }

    /// One-dimensional system with scalar coefficients.
    pub fn scalar<S, B>(sigma: S, drift: B, interpretation: Interpretation) -> Self
    where
        S: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        B: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        SdeSystem::new(
            1,
            1,
            Arc::new(move |t, u| vec![sigma(t, u[0])]),
            Arc::new(move |t, u| vec![drift(t, u[0])]),
            interpretation,
        )
    }

    pub fn with_sigma_grad(mut self, grad: StateFn) -> Self {
        self.sigma_grad = Some(grad);
        self
    }

    fn check(&self, t: f64, u: &[f64]) -> Result<()> {
        if u.len() != self.dim {
            return Err(Error::InvalidInput(format!("state has {} entries, system dimension is {}", u.len(), self.dim)));
        }
        let s = (self.sigma)(t, u);
        let b = (self.drift)(t, u);
        if s.len() != self.dim * self.noise || b.len() != self.dim {
            return Err(Error::InvalidInput("sigma or drift has the wrong shape".into()));
        }
        Ok(())
    }

    pub(crate) fn sigma_gradient(&self, t: f64, u: &[f64]) -> Vec<f64> {
        if let Some(g) = &self.sigma_grad {
            return g(t, u);
        }
        let m = self.dim * self.noise;
        let mut out = vec![0.0; self.dim * m];
        let mut p = u.to_vec();
        for beta in 0..self.dim {
            let h = fd_step(u[beta]);
            p[beta] = u[beta] + h;
            let sp = (self.sigma)(t, &p);
            p[beta] = u[beta] - h;
            let sm = (self.sigma)(t, &p);
            p[beta] = u[beta];
            for i in 0..m {
                out[beta * m + i] = (sp[i] - sm[i]) / (2.0 * h);
            }
        }
        out
    }

    /// `(rho / 2) sum_{beta, k} sigma[beta][k] d_beta sigma[alpha][k]`: Itô drift minus Stratonovich drift.
    pub fn drift_correction(&self, rho: f64, t: f64, u: &[f64]) -> Vec<f64> {
        let s = (self.sigma)(t, u);
        let g = self.sigma_gradient(t, u);
        let (d, m) = (self.dim, self.noise);
        (0..d)
            .map(|a| {
                let mut acc = 0.0;
                for beta in 0..d {
                    for k in 0..m {
                        acc += s[beta * m + k] * g[beta * d * m + a * m + k];
                    }
                }
                0.5 * rho * acc
            })
            .collect()
    }

    /// The same process written in the other interpretation.
    pub fn converted(&self, rho: f64) -> SdeSystem {
        let base = self.clone();
        let sign = match self.interpretation {
            Interpretation::Stratonovich => 1.0,
            Interpretation::Ito => -1.0,
        };
        let drift: StateFn = Arc::new(move |t, u| {
            let b = (base.drift)(t, u);
            let c = base.drift_correction(rho, t, u);
            b.iter().zip(&c).map(|(x, y)| x + sign * y).collect()
        });
        let interpretation = match self.interpretation {
            Interpretation::Stratonovich => Interpretation::Ito,
            Interpretation::Ito => Interpretation::Stratonovich,
        };
        SdeSystem { drift, interpretation, ..self.clone() }
    }
}

fn axis_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn apply_sigma(s: &[f64], dw: &[f64], noise: usize, a: usize) -> f64 {
    (0..noise).map(|k| s[a * noise + k] * dw[k]).sum()
}

/// Euler–Maruyama: `u <- u + sigma dW + b dtau` with coefficients at the step start.
pub fn integrate_ito(sys: &SdeSystem, u0: &[f64], cfg: &WienerConfig, sampling: &Sampling) -> Result<PathEnsemble> {
    if sys.interpretation != Interpretation::Ito {
        return Err(Error::InvalidInput("integrate_ito needs an Itô system".into()));
    }
    check_noise(sys, cfg)?;
    sys.check(0.0, u0)?;
    let dt = cfg.dt;
    simulate(cfg, sampling, axis_names("u", sys.dim), "euler_maruyama", u0, |_, t, u, dw, _| {
        let s = (sys.sigma)(t, u);
        let b = (sys.drift)(t, u);
        for a in 0..sys.dim {
            u[a] += apply_sigma(&s, dw, sys.noise, a) + b[a] * dt;
        }
        Ok(())
    })
}

/// Stratonovich–Heun: predictor `u~ = u + sigma(u) dW + b(u) dtau`, corrector with the averaged coefficients.
pub fn integrate_stratonovich(sys: &SdeSystem, u0: &[f64], cfg: &WienerConfig, sampling: &Sampling) -> Result<PathEnsemble> {
    if sys.interpretation != Interpretation::Stratonovich {
        return Err(Error::InvalidInput("integrate_stratonovich needs a Stratonovich system".into()));
    }
    check_noise(sys, cfg)?;
    sys.check(0.0, u0)?;
    let dt = cfg.dt;
    simulate(cfg, sampling, axis_names("u", sys.dim), "stratonovich_heun", u0, |_, t, u, dw, _| {
        let incr = |t: f64, u: &[f64]| -> Vec<f64> {
            let s = (sys.sigma)(t, u);
            let b = (sys.drift)(t, u);
            (0..sys.dim).map(|a| apply_sigma(&s, dw, sys.noise, a) + b[a] * dt).collect()
        };
        let k1 = incr(t, u);
        let pred: Vec<f64> = u.iter().zip(&k1).map(|(x, d)| x + d).collect();
        let k2 = incr(t + dt, &pred);
        for a in 0..sys.dim {
            u[a] += 0.5 * (k1[a] + k2[a]);
        }
        Ok(())
    })
}

fn check_noise(sys: &SdeSystem, cfg: &WienerConfig) -> Result<()> {
    if sys.noise != cfg.dim {
        return Err(Error::InvalidInput(format!("system has {} noise components, Wiener process {}", sys.noise, cfg.dim)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Estimators

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Sample mean and standard error of `values` (Welford).
pub fn mean_stderr(values: impl IntoIterator<Item = f64>) -> Result<Estimate> {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in values {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 samples, got {n}")));
    }
    let var = m2 / (n - 1) as f64;
    Ok(Estimate { mean, stderr: (var / n as f64).sqrt(), samples: n })
}

/// Expectation of `f` over terminal states of successful paths.
pub fn estimate_expectation(ens: &PathEnsemble, f: impl Fn(&[f64]) -> f64) -> Result<Estimate> {
    mean_stderr(ens.terminal_states().map(f))
}

/// Probability that the terminal state lies in `region`.
pub fn estimate_probability(ens: &PathEnsemble, region: impl Fn(&[f64]) -> bool) -> Result<Estimate> {
    mean_stderr(ens.terminal_states().map(|s| if region(s) { 1.0 } else { 0.0 }))
}

// ---------------------------------------------------------------------------
// Orthonormal frames

fn gram4(d: &[f64; 4], e: &Mat4, i: usize, j: usize) -> f64 {
    (0..4).map(|a| d[a] * e[a][i] * e[a][j]).sum()
}

/// Gram–Schmidt of the columns of `hint` against `diag(d)`, legs normalized to `eta`.
///
/// Returns `E[a][a']`, the components of leg `a'` in the basis where the metric is `diag(d)`.
pub fn orthonormalize_adapted(d: &[f64; 4], hint: &Mat4, eta: &[f64; 4]) -> Result<Mat4> {
    let mut e = *hint;
    for k in 0..4 {
        for j in 0..k {
            let p = gram4(d, &e, k, j) * eta[j];
            for a in 0..4 {
                e[a][k] -= p * e[a][j];
            }
        }
        let n2 = gram4(d, &e, k, k);
        if n2.abs() < 1e-14 || n2.signum() != eta[k].signum() || !n2.is_finite() {
            return Err(Error::Degenerate { name: format!("frame leg {k}"), value: n2, point: [f64::NAN; 4] });
        }
        let s = n2.abs().sqrt();
        for row in e.iter_mut() {
            row[k] /= s;
        }
    }
    Ok(e)
}

/// `max |E^T diag(d) E - eta|`.
pub fn gram_error4(d: &[f64; 4], e: &Mat4, eta: &[f64; 4]) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let target = if i == j { eta[i] } else { 0.0 };
            m = m.max((gram4(d, e, i, j) - target).abs());
        }
    }
    m
}

/// Leg normalizations: the declared signature, or the sign of the coefficient where unchecked.
fn leg_eta(spec: &MetricSpec, d: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|a| match spec.signature[a] {
        0 => d[a].signum(),
        s => s as f64,
    })
}

fn point_data(spec: &MetricSpec, u: &[f64; 4]) -> Result<PointData> {
    PointData::eval(spec, &ChartPoint::from_coords(*u)?)
}

/// Orthonormal frame `e^mu_{alpha'}` at `u`, legs normalized against the metric signature.
///
/// Gram–Schmidt runs in the N-adapted basis in fixed leg order, starting from the
/// columns of `hint`; `e[alpha'][mu]` are coordinate components as in [`FrameBasis`].
pub fn orthonormalize_frame(spec: &MetricSpec, u: &ChartPoint, hint: &Mat4) -> Result<crate::geometry::FrameBasis> {
    let pd = PointData::eval(spec, u)?;
    let eta = leg_eta(spec, &pd.adapted_diag());
    let big_e = orthonormalize_adapted(&pd.adapted_diag(), hint, &eta).map_err(|e| at_point(e, u.coords()))?;
    let frame = pd.frame();
    let coframe = pd.coframe();
    let d = pd.adapted_diag();
    let mut e = [[0.0; 4]; 4];
    let mut dual = [[0.0; 4]; 4];
    for ap in 0..4 {
        for mu in 0..4 {
            e[ap][mu] = (0..4).map(|a| big_e[a][ap] * frame[a][mu]).sum();
            // inverse of E is eta E^T diag(d)
            dual[mu][ap] = (0..4).map(|a| eta[ap] * big_e[a][ap] * d[a] * coframe[a][mu]).sum();
        }
    }
    Ok(crate::geometry::FrameBasis { e, dual })
}

fn at_point(e: Error, u: [f64; 4]) -> Error {
    match e {
        Error::Degenerate { name, value, .. } => Error::Degenerate { name, value, point: u },
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Frame-bundle diffusion

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameBundleState {
    pub u: [f64; 4],
    /// `e[a][a']`: N-adapted components of leg `a'`.
    pub e: Mat4,
    pub tau: f64,
}

/// Drift d-vector (N-adapted components) as a function of `(tau, u, frame)`.
pub type FrameDrift = Arc<dyn Fn(f64, &[f64; 4], &Mat4) -> [f64; 4] + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameOptions {
    /// Re-orthonormalization cadence in steps; `0` disables it.
    pub reortho_every: usize,
}

impl Default for FrameOptions {
    fn default() -> Self {
        FrameOptions { reortho_every: 100 }
    }
}

fn frame_columns() -> Vec<String> {
    let mut c = axis_names("u", 4);
    for a in 0..4 {
        for ap in 0..4 {
            c.push(format!("e{a}_{ap}"));
        }
    }
    c
}

fn pack_frame(u: &[f64; 4], e: &Mat4) -> Vec<f64> {
    let mut s = u.to_vec();
    for row in e {
        s.extend_from_slice(row);
    }
    s
}

fn unpack_frame(s: &[f64]) -> ([f64; 4], Mat4) {
    let u = [s[0], s[1], s[2], s[3]];
    let mut e = [[0.0; 4]; 4];
    for a in 0..4 {
        e[a].copy_from_slice(&s[4 + 4 * a..8 + 4 * a]);
    }
    (u, e)
}

/// `(du_coord, dE)` for N-adapted displacement `d` at `pd`.
fn transport_increment(pd: &PointData, gamma: &Tensor3, e: &Mat4, d: &[f64; 4]) -> ([f64; 4], Mat4) {
    let frame = pd.frame();
    let mut du = [0.0; 4];
    for mu in 0..4 {
        du[mu] = (0..4).map(|a| d[a] * frame[a][mu]).sum();
    }
    let mut de = [[0.0; 4]; 4];
    for m in 0..4 {
        for ap in 0..4 {
            let mut s = 0.0;
            for a in 0..4 {
                for c in 0..4 {
                    s += gamma[m][a][c] * e[a][ap] * d[c];
                }
            }
            de[m][ap] = -s;
        }
    }
    (du, de)
}

/// Horizontal Brownian motion of orthonormal frames: `du = e o dW + A dtau`, `de = -Gamma e o du`.
pub fn frame_bundle_diffusion(
    spec: &MetricSpec,
    state0: &FrameBundleState,
    drift: Option<&FrameDrift>,
    cfg: &WienerConfig,
    sampling: &Sampling,
    opts: &FrameOptions,
) -> Result<PathEnsemble> {
    if cfg.dim != 4 {
        return Err(Error::InvalidInput("frame-bundle diffusion needs a 4-component Wiener process".into()));
    }
    let pd0 = point_data(spec, &state0.u)?;
    let eta = leg_eta(spec, &pd0.adapted_diag());
    let g0 = gram_error4(&pd0.adapted_diag(), &state0.e, &eta);
    if g0 > 1e-8 {
        return Err(Error::InvalidInput(format!("initial frame is not orthonormal (Gram error {g0:e})")));
    }
    let dt = cfg.dt;
    let t0 = state0.tau;
    let incr = |t: f64, u: &[f64; 4], e: &Mat4, dw: &[f64]| -> Result<([f64; 4], Mat4)> {
        let pd = point_data(spec, u)?;
        let gamma = pd.canonical_gamma();
        let a = drift.map(|f| f(t, u, e)).unwrap_or([0.0; 4]);
        let mut d = [0.0; 4];
        for (m, dm) in d.iter_mut().enumerate() {
            *dm = (0..4).map(|ap| e[m][ap] * dw[ap]).sum::<f64>() + a[m] * dt;
        }
        Ok(transport_increment(&pd, &gamma, e, &d))
    };
    let mut ens = simulate(cfg, sampling, frame_columns(), "stratonovich_heun_frame", &pack_frame(&state0.u, &state0.e), |k, t, s, dw, mon| {
        let t = t0 + t;
        let (u, e) = unpack_frame(s);
        let (du1, de1) = incr(t, &u, &e, dw)?;
        let up = add4(&u, &du1, 1.0);
        let ep = addm4(&e, &de1, 1.0);
        let (du2, de2) = incr(t + dt, &up, &ep, dw)?;
        let un = avg4(&u, &du1, &du2);
        let mut en = avgm4(&e, &de1, &de2);
        let d = point_data(spec, &un)?.adapted_diag();
        mon.gram = mon.gram.max(gram_error4(&d, &en, &eta));
        if opts.reortho_every > 0 && (k + 1) % opts.reortho_every == 0 {
            en = orthonormalize_adapted(&d, &en, &eta).map_err(|e| at_point(e, un))?;
            mon.gram_reortho = mon.gram_reortho.max(gram_error4(&d, &en, &eta));
        }
        s.copy_from_slice(&pack_frame(&un, &en));
        Ok(())
    })?;
    for t in ens.tau.iter_mut() {
        *t += t0;
    }
    Ok(ens)
}

fn add4(u: &[f64; 4], d: &[f64; 4], c: f64) -> [f64; 4] {
    std::array::from_fn(|i| u[i] + c * d[i])
}

fn addm4(e: &Mat4, d: &Mat4, c: f64) -> Mat4 {
    std::array::from_fn(|i| std::array::from_fn(|j| e[i][j] + c * d[i][j]))
}

fn avg4(u: &[f64; 4], a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|i| u[i] + 0.5 * (a[i] + b[i]))
}

fn avgm4(e: &Mat4, a: &Mat4, b: &Mat4) -> Mat4 {
    std::array::from_fn(|i| std::array::from_fn(|j| e[i][j] + 0.5 * (a[i][j] + b[i][j])))
}

// ---------------------------------------------------------------------------
// Hyperbolic velocity space

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperbolicMetric {
    pub h: Mat3,
    /// `gamma[a][b][c] = v^a h_bc`.
    pub gamma: [Mat3; 3],
    pub v_time: f64,
}

pub fn v_time(v: &[f64; 3]) -> f64 {
    (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Induced metric and Christoffel symbols of the unit-mass hyperboloid in the chart `v_hat`.
pub fn hyperbolic_metric(v: &[f64; 3]) -> HyperbolicMetric {
    let vt = v_time(v);
    let h: Mat3 = std::array::from_fn(|a| std::array::from_fn(|b| if a == b { 1.0 } else { 0.0 } - v[a] * v[b] / (vt * vt)));
    let gamma = std::array::from_fn(|a| std::array::from_fn(|b| std::array::from_fn(|c| v[a] * h[b][c])));
    HyperbolicMetric { h, gamma, v_time: vt }
}

/// Symmetric fiber frame with `h E E = delta`: `E = I + v v^T / (1 + v_time)`, the square root of `h^{-1}`.
pub fn fiber_frame(v: &[f64; 3]) -> Mat3 {
    let c = 1.0 / (1.0 + v_time(v));
    std::array::from_fn(|a| std::array::from_fn(|b| if a == b { 1.0 } else { 0.0 } + c * v[a] * v[b]))
}

/// `max |E^T h E - I|`.
pub fn fiber_gram_error(v: &[f64; 3], e: &Mat3) -> f64 {
    let h = hyperbolic_metric(v).h;
    let mut m: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    s += h[a][b] * e[a][i] * e[b][j];
                }
            }
            m = m.max((s - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    m
}

/// Gram–Schmidt of the columns of `e` against `h(v)`.
pub fn reorthonormalize_fiber(v: &[f64; 3], e: &Mat3) -> Result<Mat3> {
    let h = hyperbolic_metric(v).h;
    let dot = |x: &Mat3, i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                s += h[a][b] * x[a][i] * x[b][j];
            }
        }
        s
    };
    let mut out = *e;
    for k in 0..3 {
        for j in 0..k {
            let p = dot(&out, k, j);
            for row in out.iter_mut() {
                row[k] -= p * row[j];
            }
        }
        let n2 = dot(&out, k, k);
        if !(n2 > 1e-14) {
            return Err(Error::Degenerate { name: format!("fiber leg {k}"), value: n2, point: [f64::NAN; 4] });
        }
        let s = n2.sqrt();
        for row in out.iter_mut() {
            row[k] /= s;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Relativistic diffusion

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativisticState {
    pub x: [f64; 4],
    pub v: [f64; 3],
    /// `fiber[a][a']`.
    pub fiber: Mat3,
}

impl RelativisticState {
    pub fn new(x: [f64; 4], v: [f64; 3]) -> Self {
        RelativisticState { x, v, fiber: fiber_frame(&v) }
    }

    /// Four-velocity in orthonormal components, time slot recomputed from the mass shell.
    pub fn four_velocity(&self) -> [f64; 4] {
        four_velocity(&self.v)
    }
}

pub fn four_velocity(v: &[f64; 3]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (i, &s) in SPATIAL.iter().enumerate() {
        out[s] = v[i];
    }
    out[TIME] = v_time(v);
    out
}

/// `|eta v v + 1|` with `eta = diag(1, 1, -1, 1)`.
pub fn mass_shell_error(v4: &[f64; 4]) -> f64 {
    ((0..4).map(|a| MINKOWSKI[a] * v4[a] * v4[a]).sum::<f64>() + 1.0).abs()
}

/// External force per unit rest mass `B(tau, x, v_hat)`.
pub type ForceFn = Arc<dyn Fn(f64, &[f64; 4], &[f64; 3]) -> [f64; 3] + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelativisticOptions {
    /// Fiber-frame re-orthonormalization cadence; `0` disables it.
    pub reortho_every: usize,
}

impl Default for RelativisticOptions {
    fn default() -> Self {
        RelativisticOptions { reortho_every: 100 }
    }
}

/// Spacetime seen by the velocity process.
trait Background: Sync {
    /// Orthonormal legs in coordinates `e[alpha'][mu]`, and the spatial orthonormal
    /// components of the gravitational force on four-velocity `v4`.
    fn at(&self, x: &[f64; 4], v4: &[f64; 4]) -> Result<(Mat4, [f64; 3])>;
}

struct Minkowski;

impl Background for Minkowski {
    fn at(&self, _: &[f64; 4], _: &[f64; 4]) -> Result<(Mat4, [f64; 3])> {
        Ok((crate::geometry::identity4(), [0.0; 3]))
    }
}

/// Curved spec with the orthonormal frame `diag(1 / sqrt|d_a|)` in the N-adapted basis,
/// which is what [`orthonormalize_frame`] returns for the identity hint.
struct Curved<'a> {
    spec: &'a MetricSpec,
}

impl Background for Curved<'_> {
    fn at(&self, x: &[f64; 4], v4: &[f64; 4]) -> Result<(Mat4, [f64; 3])> {
        let pd = point_data(self.spec, x)?;
        let d = pd.adapted_diag();
        let mut scale = [0.0; 4];
        for a in 0..4 {
            if d[a].signum() != MINKOWSKI[a] {
                return Err(Error::Degenerate { name: format!("frame leg {a}"), value: d[a], point: *x });
            }
            scale[a] = 1.0 / d[a].abs().sqrt();
        }
        let frame = pd.frame();
        let legs = std::array::from_fn(|ap| std::array::from_fn(|mu| scale[ap] * frame[ap][mu]));
        let gamma = pd.canonical_gamma();
        let va: [f64; 4] = std::array::from_fn(|a| scale[a] * v4[a]);
        let w: [f64; 4] = std::array::from_fn(|mu| (0..4).map(|a| va[a] * frame[a][mu]).sum());
        let mut f = [0.0; 3];
        for (i, &m) in SPATIAL.iter().enumerate() {
            // derivative of the frame field along the velocity
            let dd: f64 = (0..4).map(|mu| w[mu] * pd.diag[m].g[mu]).sum();
            let de = -0.5 * scale[m] * dd / d[m];
            let mut t = de * v4[m];
            for a in 0..4 {
                for c in 0..4 {
                    t += gamma[m][a][c] * va[a] * va[c];
                }
            }
            f[i] = MINKOWSKI[m] * scale[m] * d[m] * t;
        }
        Ok((legs, f))
    }
}

fn relativistic_columns() -> Vec<String> {
    let mut c = axis_names("x", 4);
    c.extend(axis_names("v", 3));
    for a in 0..3 {
        for ap in 0..3 {
            c.push(format!("E{a}_{ap}"));
        }
    }
    c
}

fn pack_rel(s: &RelativisticState) -> Vec<f64> {
    let mut out = s.x.to_vec();
    out.extend_from_slice(&s.v);
    for row in &s.fiber {
        out.extend_from_slice(row);
    }
    out
}

fn unpack_rel(s: &[f64]) -> RelativisticState {
    let x = [s[0], s[1], s[2], s[3]];
    let v = [s[4], s[5], s[6]];
    let mut fiber = [[0.0; 3]; 3];
    for a in 0..3 {
        fiber[a].copy_from_slice(&s[7 + 3 * a..10 + 3 * a]);
    }
    RelativisticState { x, v, fiber }
}

/// `(dx, dv, omega)`: position and velocity increments and the rotation generator of the fiber frame.
type RelIncrement = ([f64; 4], [f64; 3], Mat3);

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Inverse of [`fiber_frame`]: `F^{-1} = h F`.
fn fiber_frame_inv(v: &[f64; 3]) -> Mat3 {
    mat3_mul(&hyperbolic_metric(v).h, &fiber_frame(v))
}

/// Generator `omega` of `dR = omega R` where `E = F(v) R`, for a velocity increment `dv`.
///
/// Levi-Civita transport `dE = v (E^T h dv)^T` (the Christoffel symbols of `h` are
/// `-v^a h_bc`) gives `omega = F^{-1} (v (h dv)^T F - dF)`, antisymmetric up to round-off.
fn fiber_generator(v: &[f64; 3], dv: &[f64; 3]) -> Mat3 {
    let vt = v_time(v);
    let c = 1.0 / (1.0 + vt);
    let dc = -c * c * (0..3).map(|i| v[i] * dv[i]).sum::<f64>() / vt;
    let f = fiber_frame(v);
    let finv = fiber_frame_inv(v);
    let h = hyperbolic_metric(v).h;
    let hdv: [f64; 3] = std::array::from_fn(|b| (0..3).map(|c| h[b][c] * dv[c]).sum());
    let row: [f64; 3] = std::array::from_fn(|j| (0..3).map(|b| hdv[b] * f[b][j]).sum());
    let inner: Mat3 = std::array::from_fn(|i| {
        std::array::from_fn(|j| v[i] * row[j] - (dc * v[i] * v[j] + c * (dv[i] * v[j] + v[i] * dv[j])))
    });
    let w = mat3_mul(&finv, &inner);
    std::array::from_fn(|i| std::array::from_fn(|j| 0.5 * (w[i][j] - w[j][i])))
}

/// `exp(omega)` for antisymmetric `omega` (Rodrigues).
fn rotation(omega: &Mat3) -> Mat3 {
    let ax = [omega[2][1], omega[0][2], omega[1][0]];
    let t2 = ax.iter().map(|x| x * x).sum::<f64>();
    let (s, c) = if t2 < 1e-8 {
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
    } else {
        let t = t2.sqrt();
        (t.sin() / t, (1.0 - t.cos()) / t2)
    };
    let o2 = mat3_mul(omega, omega);
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 } + s * omega[i][j] + c * o2[i][j]))
}

fn rel_increment(bg: &dyn Background, force: Option<&ForceFn>, t: f64, s: &RelativisticState, dw: &[f64], dt: f64) -> Result<RelIncrement> {
    let v4 = four_velocity(&s.v);
    let (legs, f) = bg.at(&s.x, &v4)?;
    let dx: [f64; 4] = std::array::from_fn(|mu| (0..4).map(|ap| v4[ap] * legs[ap][mu]).sum::<f64>() * dt);
    let b = force.map(|g| g(t, &s.x, &s.v)).unwrap_or([0.0; 3]);
    let dv: [f64; 3] = std::array::from_fn(|a| (b[a] - f[a]) * dt + (0..3).map(|k| s.fiber[a][k] * dw[k]).sum::<f64>());
    Ok((dx, dv, fiber_generator(&s.v, &dv)))
}

/// Moves `s` by `a`, or by the average of `a` and `b`; the frame rotates as `E' = F(v') exp(omega) F(v)^{-1} E`.
fn apply_rel(s: &RelativisticState, a: &RelIncrement, b: Option<&RelIncrement>) -> RelativisticState {
    let mix = |p: f64, q: Option<f64>| match q {
        None => p,
        Some(q) => 0.5 * (p + q),
    };
    let dx: [f64; 4] = std::array::from_fn(|i| mix(a.0[i], b.map(|b| b.0[i])));
    let dv: [f64; 3] = std::array::from_fn(|i| mix(a.1[i], b.map(|b| b.1[i])));
    let omega: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| mix(a.2[i][j], b.map(|b| b.2[i][j]))));
    let v = std::array::from_fn(|i| s.v[i] + dv[i]);
    let r = mat3_mul(&rotation(&omega), &mat3_mul(&fiber_frame_inv(&s.v), &s.fiber));
    RelativisticState { x: std::array::from_fn(|i| s.x[i] + dx[i]), v, fiber: mat3_mul(&fiber_frame(&v), &r) }
}

fn relativistic(
    bg: &dyn Background,
    state0: &RelativisticState,
    force: Option<&ForceFn>,
    cfg: &WienerConfig,
    sampling: &Sampling,
    opts: &RelativisticOptions,
    scheme: &str,
) -> Result<PathEnsemble> {
    if cfg.dim != 3 {
        return Err(Error::InvalidInput("relativistic diffusion needs a 3-component Wiener process".into()));
    }
    let g0 = fiber_gram_error(&state0.v, &state0.fiber);
    if g0 > 1e-8 {
        return Err(Error::InvalidInput(format!("initial fiber frame violates h E E = delta (error {g0:e})")));
    }
    let dt = cfg.dt;
    simulate(cfg, sampling, relativistic_columns(), scheme, &pack_rel(state0), |k, t, raw, dw, mon| {
        let s = unpack_rel(raw);
        let a = rel_increment(bg, force, t, &s, dw, dt)?;
        let pred = apply_rel(&s, &a, None);
        let b = rel_increment(bg, force, t + dt, &pred, dw, dt)?;
        let mut next = apply_rel(&s, &a, Some(&b));
        mon.constraint = mon.constraint.max(mass_shell_error(&four_velocity(&next.v)));
        mon.gram = mon.gram.max(fiber_gram_error(&next.v, &next.fiber));
        if opts.reortho_every > 0 && (k + 1) % opts.reortho_every == 0 {
            next.fiber = reorthonormalize_fiber(&next.v, &next.fiber)?;
            mon.gram_reortho = mon.gram_reortho.max(fiber_gram_error(&next.v, &next.fiber));
        }
        raw.copy_from_slice(&pack_rel(&next));
        Ok(())
    })
}

/// Special-relativistic diffusion on the Minkowski base with hyperbolic Brownian velocities.
pub fn sr_relativistic_diffusion(
    state0: &RelativisticState,
    force: Option<&ForceFn>,
    cfg: &WienerConfig,
    sampling: &Sampling,
    opts: &RelativisticOptions,
) -> Result<PathEnsemble> {
    relativistic(&Minkowski, state0, force, cfg, sampling, opts, "relativistic_heun")
}

/// Langevin dynamics on a curved N-adapted spacetime: velocities in the orthonormal
/// frame of [`orthonormalize_frame`] feel the canonical d-connection force.
pub fn gr_relativistic_diffusion(
    spec: &MetricSpec,
    state0: &RelativisticState,
    force: Option<&ForceFn>,
    cfg: &WienerConfig,
    sampling: &Sampling,
    opts: &RelativisticOptions,
) -> Result<PathEnsemble> {
    if spec.signature != [1, 1, -1, 1] {
        return Err(Error::InvalidInput(format!("relativistic diffusion needs signature (+,+,-,+), got {:?}", spec.signature)));
    }
    point_data(spec, &state0.x)?;
    let bg = Curved { spec };
    relativistic(&bg, state0, force, cfg, sampling, opts, "relativistic_heun")
}

/// Terminal relativistic state of path `p`.
pub fn relativistic_state(ens: &PathEnsemble, p: usize, record: usize) -> RelativisticState {
    unpack_rel(ens.state(p, record))
}

/// Terminal frame-bundle state of path `p`.
pub fn frame_state(ens: &PathEnsemble, p: usize, record: usize) -> FrameBundleState {
    let (u, e) = unpack_frame(ens.state(p, record));
    FrameBundleState { u, e, tau: ens.tau[record] }
}
