//! Batch front end: JSON run configurations, command dispatch, artifacts and run reports.
//!
//! # Configuration schema
//!
//! A run configuration is one JSON object. Only `command` is required; every
//! other top-level key has a default or is needed only by some commands.
//!
//! | key | type | default | used by |
//! |---|---|---|---|
//! | `command` | `"geometry-check"`, `"solve"`, `"simulate"`, `"fp-evolve"` or `"ensemble"` | required | all |
//! | `seed` | unsigned integer | `0` | simulate, ensemble, checks |
//! | `out` | directory | `"nhdiff-out"` | all (the `--out` flag wins) |
//! | `derivatives` | list of `"analytic"`, `"finite_difference"` | `["analytic"]` | all; both entries cross-check analytic jets against finite differences |
//! | `tolerances` | object, see below | see below | all |
//! | `metric` | object, see below | flat `diag(1, 1, -1, 1)` | geometry-check, simulate (`general`), fp-evolve |
//! | `geometry` | `{"points": [[x1, x2, t, y], ...], "expect_flat": bool}` | origin, `false` | geometry-check |
//! | `grid` | `{"x1": axis, "x2": axis, "t": axis}`, axis = `{"start", "end", "points"}` | none | solve, ensemble |
//! | `solve` | object, see below | none | solve, ensemble |
//! | `simulate` | object, see below | none | simulate |
//! | `fp` | object, see below | none | fp-evolve |
//! | `ensemble` | object, see below | none | ensemble |
//! | `checks` | list of acceptance check names | `[]` | all; each check runs after the command |
//!
//! `tolerances`: `geometry` (`1e-10`, metricity and flatness), `residual` (`1e-8`,
//! field-equation max-norm), `constraint` (`1e-8`, mass shell and fiber Gram error),
//! `mass` (`1e-9`, relative mass change).
//!
//! Coefficient fields are either a number or an expression object tagged by `kind`:
//! `{"kind": "const", "value": c}`,
//! `{"kind": "poly", "terms": [{"coef": c, "powers": [p1, p2, p3, p4]}, ...]}`,
//! `{"kind": "trig", "amp": a, "freq": [k1, k2, k3, k4], "phase": p, "func": "sin" | "cos"}`,
//! `{"kind": "exp", "amp": a, "rate": [k1, k2, k3, k4]}`,
//! `{"kind": "tabulated", "axes": [i, j], "origin": [o_i, o_j], "spacing": [d_i, d_j], "shape": [n_i, n_j], "values": [...]}`
//! (bilinear, row-major over the first axis), and `{"kind": "sum", "terms": [...]}` /
//! `{"kind": "product", "factors": [...]}`. Coordinates are ordered `(x1, x2, t, y)`.
//!
//! `metric`: `g` and `h` (two coefficients each), `n` (`[[N^3_1, N^3_2], [N^4_1, N^4_2]]`,
//! zero by default) and `signature` (signs of `g1, g2, h3, h4`, `0` disables a sign check).
//!
//! `solve`: `generator` selects the family through its `family` tag:
//! `{"family": "a", "phi", "upsilon2", "upsilon4"?, "h4_0"?, "sign"?}`,
//! `{"family": "vacuum", "h3", "w": [w1, w2], "upsilon2", "upsilon4"?, "h4_0"?}`,
//! `{"family": "h3const", "h3_0", "upsilon2", "upsilon4"?, "h4_init", "dh4_init"}` or
//! `{"family": "constphi", "f", "upsilon2", "upsilon4"?, "h_0", "sigma40"}`.
//! Further keys: `n` (`{"n1": [..2], "n2": [..2]}`), `psi` (`omega`, `tol`,
//! `max_sweeps`, `stencil` = `five_point` | `compact`, `equation` = `linear` | `conformal`),
//! `psi_boundary`, `signature` (required signs of `h3, h4`, or `null`),
//! `require_lc` and `lc_tol`.
//!
//! `simulate`: `rho`, `dt`, `steps`, `paths` (`1`), `save_every` (`1`, `0` keeps endpoints)
//! and `model`, tagged by `type`: `{"type": "generic", "interpretation": "ito" | "stratonovich",
//! "drift": [..dim], "sigma": [..dim * noise], "noise", "u0": [..dim]}` (state slots fill the
//! coordinates in order), `{"type": "special", "x0", "v0", "options"?}` on Minkowski space or
//! `{"type": "general", ...}` on the `metric` section.
//!
//! `fp`: `lattice` (`{"axes": [{"coord", "lo", "hi", "n"}, ...], "boundary", "fixed"}`), `rho`,
//! optional `drift` (four N-adapted components), `initial` (`{"point_mass": {"at": [...]}}` or
//! `{"density": {"f": coefficient}}`), `tau` and `dt`.
//!
//! `ensemble`: `varpi`, `tilde_source` (`{"h_diffusion": {"initial", "rho", "psi"?}}`,
//! `{"random_source": {"amplitude", "correlation_length"}}` or `{"brownian": {"rho"}}`),
//! `realizations`, `probes` (flat grid indices), `accept_tol` (`1e-4`),
//! `min_acceptance` (`0.5`) and `lc_tol`.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::de::{DeserializeOwned, Error as _};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Map, Value};

use crate::ansatz::{
    generate_family_a, generate_family_constphi, generate_family_h3const, generate_family_vacuum, lc_constraint_check, residuals, AnsatzSolution,
    ConstPhiData, GeneratingData, H3ConstData, Input, NIntegration, PsiOptions, Sign, SolveOptions, VacuumData, LC_TOL,
};
use crate::checks;
use crate::field::{DerivativeMode, Expr, Field, ScalarField};
use crate::fokker_planck::{fokker_planck_evolve, AdaptedDrift, DensityGrid, Lattice};
use crate::geometry::{canonical_dconnection, distortion, levi_civita, max_abs3, metric_covariant_derivative, ChartPoint, MetricSpec};
use crate::grid::Grid3;
use crate::io::{sha256_hex, to_json, write_artifact, Csv};
use crate::sde::{
    gr_relativistic_diffusion, integrate_ito, integrate_stratonovich, sr_relativistic_diffusion, Interpretation, PathEnsemble,
    RelativisticOptions, RelativisticState, Sampling, SdeSystem, StateFn, WienerConfig,
};
use crate::stochastic_metrics::{generate_ensemble, EnsembleOptions, FamilyData, RandomGeneratorConfig, TildeSource};
use crate::{Error, Result};

/// Exit status when every step ran but a configured check failed.
pub const EXIT_CHECK_FAILURE: i32 = 3;

pub const DEFAULT_OUT: &str = "nhdiff-out";

// ---------------------------------------------------------------------------
// Schema

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GeometryCheck,
    Solve,
    Simulate,
    FpEvolve,
    Ensemble,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeRequest {
    Analytic,
    FiniteDifference,
}

/// A coefficient field: a bare number or a tagged [`Expr`].
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Coef(pub Expr);

impl<'de> Deserialize<'de> for Coef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        if let Some(c) = v.as_f64() {
            return Ok(Coef(Expr::constant(c)));
        }
        serde_json::from_value(v).map(Coef).map_err(D::Error::custom)
    }
}

impl From<f64> for Coef {
    fn from(c: f64) -> Self {
        Coef(Expr::constant(c))
    }
}

impl Coef {
    pub fn field(&self) -> Field {
        self.0.clone().into_field()
    }

    pub fn input(&self) -> Input {
        Input::Field(self.field())
    }
}

fn zero() -> Coef {
    Coef::from(0.0)
}

fn zeros2() -> [Coef; 2] {
    [zero(), zero()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    pub geometry: f64,
    pub residual: f64,
    pub constraint: f64,
    pub mass: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { geometry: 1e-10, residual: 1e-8, constraint: 1e-8, mass: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub g: [Coef; 2],
    pub h: [Coef; 2],
    pub n: [[Coef; 2]; 2],
    pub signature: [i8; 4],
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { g: [1.0.into(), 1.0.into()], h: [(-1.0).into(), 1.0.into()], n: [zeros2(), zeros2()], signature: [1, 1, -1, 1] }
    }
}

impl MetricConfig {
    pub fn spec(&self, mode: DerivativeMode) -> MetricSpec {
        let mut s = MetricSpec::diagonal([self.g[0].field(), self.g[1].field()], [self.h[0].field(), self.h[1].field()]);
        for a in 0..2 {
            for k in 0..2 {
                s = s.with_n(2 + a, k, self.n[a][k].field());
            }
        }
        s.with_signature(self.signature).with_mode(mode)
    }

    fn exprs(&self) -> Vec<(String, &Expr)> {
        let mut out = vec![];
        for (i, c) in self.g.iter().enumerate() {
            out.push((format!("metric.g[{i}]"), &c.0));
        }
        for (i, c) in self.h.iter().enumerate() {
            out.push((format!("metric.h[{i}]"), &c.0));
        }
        for a in 0..2 {
            for k in 0..2 {
                out.push((format!("metric.n[{a}][{k}]"), &self.n[a][k].0));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    pub points: Vec<[f64; 4]>,
    /// Adds a check that connection, torsion, anholonomy and distortion vanish.
    pub expect_flat: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { points: vec![[0.0; 4]], expect_flat: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    A {
        phi: Coef,
        upsilon2: Coef,
        #[serde(default = "zero")]
        upsilon4: Coef,
        #[serde(default = "zero")]
        h4_0: Coef,
        #[serde(default)]
        sign: Sign,
    },
    Vacuum {
        h3: Coef,
        w: [Coef; 2],
        upsilon2: Coef,
        #[serde(default = "zero")]
        upsilon4: Coef,
        #[serde(default = "zero")]
        h4_0: Coef,
    },
    H3const {
        h3_0: f64,
        upsilon2: Coef,
        #[serde(default = "zero")]
        upsilon4: Coef,
        h4_init: Coef,
        dh4_init: Coef,
    },
    Constphi {
        f: Coef,
        upsilon2: Coef,
        #[serde(default = "zero")]
        upsilon4: Coef,
        h_0: f64,
        sigma40: Coef,
    },
}

impl GeneratorConfig {
    /// Generator data and the sure input a stochastic ensemble randomizes.
    pub fn family_data(&self, n: &NConfig) -> (FamilyData, Input) {
        let n = n.integration();
        match self {
            GeneratorConfig::A { phi, upsilon2, upsilon4, h4_0, sign } => (
                FamilyData::A(GeneratingData {
                    phi: phi.input(),
                    upsilon2: upsilon2.input(),
                    upsilon4: upsilon4.field(),
                    h4_0: h4_0.input(),
                    n,
                    sign: *sign,
                }),
                phi.input(),
            ),
            GeneratorConfig::Vacuum { h3, w, upsilon2, upsilon4, h4_0 } => (
                FamilyData::Vacuum(VacuumData {
                    h3: h3.input(),
                    w: [w[0].input(), w[1].input()],
                    h4_0: h4_0.input(),
                    n,
                    upsilon2: upsilon2.input(),
                    upsilon4: upsilon4.field(),
                }),
                h3.input(),
            ),
            GeneratorConfig::H3const { h3_0, upsilon2, upsilon4, h4_init, dh4_init } => (
                FamilyData::H3const(H3ConstData {
                    h3_0: *h3_0,
                    upsilon2: upsilon2.field(),
                    upsilon4: upsilon4.field(),
                    h4_init: h4_init.field(),
                    dh4_init: dh4_init.field(),
                    n,
                }),
                h4_init.input(),
            ),
            GeneratorConfig::Constphi { f, upsilon2, upsilon4, h_0, sigma40 } => (
                FamilyData::Constphi(ConstPhiData {
                    f: f.input(),
                    upsilon2: upsilon2.input(),
                    upsilon4: upsilon4.field(),
                    h_0: *h_0,
                    sigma40: sigma40.input(),
                    n,
                }),
                f.input(),
            ),
        }
    }

    fn exprs(&self) -> Vec<(&'static str, &Expr)> {
        match self {
            GeneratorConfig::A { phi, upsilon2, upsilon4, h4_0, .. } => {
                vec![("phi", &phi.0), ("upsilon2", &upsilon2.0), ("upsilon4", &upsilon4.0), ("h4_0", &h4_0.0)]
            }
            GeneratorConfig::Vacuum { h3, w, upsilon2, upsilon4, h4_0 } => vec![
                ("h3", &h3.0),
                ("w[0]", &w[0].0),
                ("w[1]", &w[1].0),
                ("upsilon2", &upsilon2.0),
                ("upsilon4", &upsilon4.0),
                ("h4_0", &h4_0.0),
            ],
            GeneratorConfig::H3const { upsilon2, upsilon4, h4_init, dh4_init, .. } => {
                vec![("upsilon2", &upsilon2.0), ("upsilon4", &upsilon4.0), ("h4_init", &h4_init.0), ("dh4_init", &dh4_init.0)]
            }
            GeneratorConfig::Constphi { f, upsilon2, upsilon4, sigma40, .. } => {
                vec![("f", &f.0), ("upsilon2", &upsilon2.0), ("upsilon4", &upsilon4.0), ("sigma40", &sigma40.0)]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NConfig {
    pub n1: [Coef; 2],
    pub n2: [Coef; 2],
}

impl Default for NConfig {
    fn default() -> Self {
        NConfig { n1: zeros2(), n2: zeros2() }
    }
}

impl NConfig {
    fn integration(&self) -> NIntegration {
        NIntegration { n1: [self.n1[0].input(), self.n1[1].input()], n2: [self.n2[0].input(), self.n2[1].input()] }
    }
}

fn default_h_signature() -> Option<[i8; 2]> {
    Some([-1, 1])
}

fn default_lc_tol() -> f64 {
    LC_TOL
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub n: NConfig,
    #[serde(default)]
    pub psi: PsiOptions,
    #[serde(default = "zero")]
    pub psi_boundary: Coef,
    #[serde(default = "default_h_signature")]
    pub signature: Option<[i8; 2]>,
    /// Adds the Levi-Civita constraint check to the run.
    #[serde(default)]
    pub require_lc: bool,
    #[serde(default = "default_lc_tol")]
    pub lc_tol: f64,
}

impl SolveConfig {
    pub fn options(&self, mode: DerivativeMode) -> SolveOptions {
        SolveOptions { mode, signature: self.signature, psi: self.psi, psi_boundary: self.psi_boundary.field() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Model {
    Generic {
        interpretation: Interpretation,
        drift: Vec<Coef>,
        /// Row-major `dim x noise`.
        sigma: Vec<Coef>,
        noise: usize,
        u0: Vec<f64>,
    },
    Special {
        x0: [f64; 4],
        v0: [f64; 3],
        #[serde(default)]
        options: RelativisticOptions,
    },
    General {
        x0: [f64; 4],
        v0: [f64; 3],
        #[serde(default)]
        options: RelativisticOptions,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub model: Model,
    pub rho: f64,
    pub dt: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub paths: usize,
    #[serde(default = "one")]
    pub save_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDensity {
    PointMass { at: Vec<f64> },
    Density { f: Coef },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpConfig {
    pub lattice: Lattice,
    pub rho: f64,
    #[serde(default)]
    pub drift: Option<[Coef; 4]>,
    pub initial: InitialDensity,
    pub tau: f64,
    pub dt: f64,
}

fn default_accept_tol() -> f64 {
    1e-4
}

fn default_min_acceptance() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub varpi: f64,
    pub tilde_source: TildeSource,
    pub realizations: usize,
    #[serde(default)]
    pub probes: Vec<usize>,
    #[serde(default = "default_accept_tol")]
    pub accept_tol: f64,
    #[serde(default = "default_min_acceptance")]
    pub min_acceptance: f64,
    #[serde(default = "default_lc_tol")]
    pub lc_tol: f64,
}

/// A fully validated run configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    /// Output directory; not part of the configuration hash.
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub derivatives: Vec<DerivativeRequest>,
    pub tolerances: Tolerances,
    pub metric: MetricConfig,
    pub geometry: GeometryConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid3>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fp: Option<FpConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleConfig>,
    pub checks: Vec<String>,
}

impl RunConfig {
    pub fn derivative_mode(&self) -> DerivativeMode {
        let a = self.derivatives.contains(&DerivativeRequest::Analytic);
        let f = self.derivatives.contains(&DerivativeRequest::FiniteDifference);
        match (a, f) {
            (true, true) => DerivativeMode::CrossCheck,
            (false, true) => DerivativeMode::FiniteDifference,
            _ => DerivativeMode::Analytic,
        }
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON of the effective configuration.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("configuration serializes");
        sha256_hex(v.to_string().as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Parsing

/// One schema problem, located by line and column or by field path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfigError {
    pub field: Option<String>,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn field(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { field: Some(path.into()), line: None, column: None, message: message.into() }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (&self.field, self.line, self.column) {
            (Some(p), _, _) => write!(f, "{p}: {}", self.message),
            (None, Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

const TOP_KEYS: [&str; 13] =
    ["command", "seed", "out", "derivatives", "tolerances", "metric", "geometry", "grid", "solve", "simulate", "fp", "ensemble", "checks"];

fn join_path(section: &str, inner: &str) -> String {
    match inner {
        "" | "." | "?" => section.to_string(),
        p if p.starts_with('[') => format!("{section}{p}"),
        p => format!("{section}.{p}"),
    }
}

/// Deserializes `obj[key]`, recording unknown nested keys and the first type error.
fn section<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, errors: &mut Vec<ConfigError>) -> Option<T> {
    let v = obj.get(key)?.clone();
    let mut unknown = Vec::new();
    let parsed: std::result::Result<T, _> =
        serde_path_to_error::deserialize(serde_ignored::Deserializer::new(v, &mut |p: serde_ignored::Path| unknown.push(p.to_string())));
    for p in unknown {
        errors.push(ConfigError::field(join_path(key, &p), "unknown field"));
    }
    match parsed {
        Ok(t) => Some(t),
        Err(e) => {
            errors.push(ConfigError::field(join_path(key, &e.path().to_string()), e.inner().to_string()));
            None
        }
    }
}

/// Parses and validates a run configuration, reporting every problem found.
pub fn parse_config(text: &str) -> std::result::Result<RunConfig, Vec<ConfigError>> {
    let value: Value = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let msg = msg.split(" at line ").next().unwrap_or(&msg).to_string();
        vec![ConfigError { field: None, line: Some(e.line()), column: Some(e.column()), message: msg }]
    })?;
    let Value::Object(obj) = value else {
        return Err(vec![ConfigError { field: None, line: Some(1), column: Some(1), message: "configuration must be a JSON object".into() }]);
    };
    let mut errors: Vec<ConfigError> =
        obj.keys().filter(|k| !TOP_KEYS.contains(&k.as_str())).map(|k| ConfigError::field(k.clone(), "unknown field")).collect();

    let command: Option<Command> = section(&obj, "command", &mut errors);
    if !obj.contains_key("command") {
        errors.push(ConfigError::field("command", "missing required field"));
    }
    let seed = section(&obj, "seed", &mut errors).unwrap_or(0);
    let out = section::<PathBuf>(&obj, "out", &mut errors);
    let derivatives = section(&obj, "derivatives", &mut errors).unwrap_or_else(|| vec![DerivativeRequest::Analytic]);
    let tolerances = section(&obj, "tolerances", &mut errors).unwrap_or_default();
    let metric = section(&obj, "metric", &mut errors).unwrap_or_default();
    let geometry = section(&obj, "geometry", &mut errors).unwrap_or_default();
    let grid = section(&obj, "grid", &mut errors);
    let solve = section(&obj, "solve", &mut errors);
    let simulate = section(&obj, "simulate", &mut errors);
    let fp = section(&obj, "fp", &mut errors);
    let ensemble = section(&obj, "ensemble", &mut errors);
    let checks = section(&obj, "checks", &mut errors).unwrap_or_default();

    // A section that failed to deserialize already has its error; skip its constraints.
    let failed: Vec<String> = errors.iter().filter_map(|e| e.field.as_ref().map(|f| f.split(['.', '[']).next().unwrap_or("").to_string())).collect();
    let Some(command) = command else {
        return Err(errors);
    };
    let cfg = RunConfig { command, seed, out, derivatives, tolerances, metric, geometry, grid, solve, simulate, fp, ensemble, checks };
    for e in validate(&cfg) {
        let sec = e.field.as_deref().unwrap_or("").split(['.', '[']).next().unwrap_or("");
        if !failed.iter().any(|f| f == sec) {
            errors.push(e);
        }
    }
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

fn positive(errors: &mut Vec<ConfigError>, path: &str, v: f64) {
    if !(v > 0.0 && v.is_finite()) {
        errors.push(ConfigError::field(path, format!("must be positive, got {v}")));
    }
}

fn nonnegative(errors: &mut Vec<ConfigError>, path: &str, v: f64) {
    if !(v >= 0.0 && v.is_finite()) {
        errors.push(ConfigError::field(path, format!("must be finite and nonnegative, got {v}")));
    }
}

fn all_finite(errors: &mut Vec<ConfigError>, path: &str, v: &[f64]) {
    if v.iter().any(|x| !x.is_finite()) {
        errors.push(ConfigError::field(path, "must be finite"));
    }
}

fn check_expr(errors: &mut Vec<ConfigError>, path: &str, e: &Expr) {
    if let Err(m) = e.validate() {
        errors.push(ConfigError::field(path, m));
    }
}

fn require<T>(errors: &mut Vec<ConfigError>, section: &Option<T>, name: &str, command: Command) {
    if section.is_none() {
        errors.push(ConfigError::field(name, format!("required by {}", command_name(command))));
    }
}

pub fn command_name(c: Command) -> &'static str {
    match c {
        Command::GeometryCheck => "geometry-check",
        Command::Solve => "solve",
        Command::Simulate => "simulate",
        Command::FpEvolve => "fp-evolve",
        Command::Ensemble => "ensemble",
    }
}

/// Constraint checks on an already well-typed configuration.
fn validate(cfg: &RunConfig) -> Vec<ConfigError> {
    let mut e = Vec::new();
    if cfg.derivatives.is_empty() {
        e.push(ConfigError::field("derivatives", "must request at least one derivative mode"));
    }
    let t = &cfg.tolerances;
    for (name, v) in [("geometry", t.geometry), ("residual", t.residual), ("constraint", t.constraint), ("mass", t.mass)] {
        positive(&mut e, &format!("tolerances.{name}"), v);
    }
    validate_metric(&mut e, &cfg.metric);
    for name in &cfg.checks {
        if name != "all" && checks::find(name).is_none() {
            e.push(ConfigError::field("checks", format!("unknown check `{name}`")));
        }
    }
    match cfg.command {
        Command::GeometryCheck => {
            if cfg.geometry.points.is_empty() {
                e.push(ConfigError::field("geometry.points", "needs at least one point"));
            }
            for (i, p) in cfg.geometry.points.iter().enumerate() {
                all_finite(&mut e, &format!("geometry.points[{i}]"), p);
            }
        }
        Command::Solve | Command::Ensemble => {
            require(&mut e, &cfg.grid, "grid", cfg.command);
            require(&mut e, &cfg.solve, "solve", cfg.command);
            if cfg.command == Command::Ensemble {
                require(&mut e, &cfg.ensemble, "ensemble", cfg.command);
            }
        }
        Command::Simulate => require(&mut e, &cfg.simulate, "simulate", cfg.command),
        Command::FpEvolve => require(&mut e, &cfg.fp, "fp", cfg.command),
    }
    if let Some(g) = &cfg.grid {
        for (name, a) in [("x1", g.x1), ("x2", g.x2), ("t", g.t)] {
            if let Err(err) = a.validate() {
                e.push(ConfigError::field(format!("grid.{name}"), err.to_string()));
            }
        }
    }
    if let Some(s) = &cfg.solve {
        validate_solve(&mut e, s);
    }
    if let Some(s) = &cfg.simulate {
        validate_simulate(&mut e, s);
    }
    if let Some(f) = &cfg.fp {
        positive(&mut e, "fp.rho", f.rho);
        positive(&mut e, "fp.tau", f.tau);
        positive(&mut e, "fp.dt", f.dt);
        if let Err(err) = f.lattice.validate() {
            e.push(ConfigError::field("fp.lattice", err.to_string()));
        }
        if let Some(d) = &f.drift {
            for (i, c) in d.iter().enumerate() {
                check_expr(&mut e, &format!("fp.drift[{i}]"), &c.0);
            }
        }
        match &f.initial {
            InitialDensity::PointMass { at } => {
                if at.len() != f.lattice.axes.len() {
                    e.push(ConfigError::field(
                        "fp.initial.point_mass.at",
                        format!("has {} coordinates, the lattice has {} axes", at.len(), f.lattice.axes.len()),
                    ));
                }
                all_finite(&mut e, "fp.initial.point_mass.at", at);
            }
            InitialDensity::Density { f } => check_expr(&mut e, "fp.initial.density.f", &f.0),
        }
    }
    if let Some(en) = &cfg.ensemble {
        nonnegative(&mut e, "ensemble.varpi", en.varpi);
        if en.realizations == 0 {
            e.push(ConfigError::field("ensemble.realizations", "must be at least 1"));
        }
        positive(&mut e, "ensemble.accept_tol", en.accept_tol);
        positive(&mut e, "ensemble.lc_tol", en.lc_tol);
        if !(0.0..=1.0).contains(&en.min_acceptance) {
            e.push(ConfigError::field("ensemble.min_acceptance", format!("must lie in [0, 1], got {}", en.min_acceptance)));
        }
        match &en.tilde_source {
            TildeSource::HDiffusion { rho, .. } => positive(&mut e, "ensemble.tilde_source.h_diffusion.rho", *rho),
            TildeSource::Brownian { rho } => positive(&mut e, "ensemble.tilde_source.brownian.rho", *rho),
            TildeSource::RandomSource { correlation_length, .. } => {
                positive(&mut e, "ensemble.tilde_source.random_source.correlation_length", *correlation_length)
            }
        }
        if let Some(g) = &cfg.grid {
            if let Some(p) = en.probes.iter().find(|&&p| p >= g.len()) {
                e.push(ConfigError::field("ensemble.probes", format!("index {p} is outside a grid of {} nodes", g.len())));
            }
        }
    }
    e
}

fn validate_metric(e: &mut Vec<ConfigError>, m: &MetricConfig) {
    for (i, s) in m.signature.iter().enumerate() {
        if !(-1..=1).contains(s) {
            e.push(ConfigError::field(format!("metric.signature[{i}]"), format!("must be -1, 0 or 1, got {s}")));
        }
    }
    for (path, ex) in m.exprs() {
        check_expr(e, &path, ex);
    }
}

/// Parses a stand-alone `metric` section with the same checks as [`parse_config`].
pub fn parse_metric(text: &str) -> std::result::Result<MetricConfig, Vec<ConfigError>> {
    let value: Value = serde_json::from_str(text).map_err(|e| {
        vec![ConfigError { field: None, line: Some(e.line()), column: Some(e.column()), message: e.to_string() }]
    })?;
    let obj: Map<String, Value> = [("metric".to_string(), value)].into_iter().collect();
    let mut errors = Vec::new();
    let metric = section::<MetricConfig>(&obj, "metric", &mut errors);
    if let Some(m) = &metric {
        if errors.is_empty() {
            validate_metric(&mut errors, m);
        }
    }
    match metric {
        Some(m) if errors.is_empty() => Ok(m),
        _ => Err(errors),
    }
}

fn validate_solve(e: &mut Vec<ConfigError>, s: &SolveConfig) {
    for (name, ex) in s.generator.exprs() {
        check_expr(e, &format!("solve.generator.{name}"), ex);
    }
    if let GeneratorConfig::Constphi { h_0, .. } = &s.generator {
        positive(e, "solve.generator.h_0", h_0.abs());
    }
    positive(e, "solve.psi.tol", s.psi.tol);
    if !(s.psi.omega > 0.0 && s.psi.omega < 2.0) {
        e.push(ConfigError::field("solve.psi.omega", format!("must lie in (0, 2), got {}", s.psi.omega)));
    }
    if s.psi.max_sweeps == 0 {
        e.push(ConfigError::field("solve.psi.max_sweeps", "must be at least 1"));
    }
    if let Some(sig) = s.signature {
        if sig.iter().any(|x| x.abs() != 1) {
            e.push(ConfigError::field("solve.signature", format!("entries must be -1 or 1, got {sig:?}")));
        }
    }
    positive(e, "solve.lc_tol", s.lc_tol);
}

fn validate_simulate(e: &mut Vec<ConfigError>, s: &SimulateConfig) {
    positive(e, "simulate.rho", s.rho);
    positive(e, "simulate.dt", s.dt);
    if s.steps == 0 {
        e.push(ConfigError::field("simulate.steps", "must be at least 1"));
    }
    if s.paths == 0 {
        e.push(ConfigError::field("simulate.paths", "must be at least 1"));
    }
    match &s.model {
        Model::Generic { drift, sigma, noise, u0, .. } => {
            let dim = drift.len();
            if !(1..=4).contains(&dim) {
                e.push(ConfigError::field("simulate.model.drift", format!("needs 1 to 4 components, got {dim}")));
            }
            if *noise == 0 {
                e.push(ConfigError::field("simulate.model.noise", "must be at least 1"));
            }
            if sigma.len() != dim * noise {
                e.push(ConfigError::field("simulate.model.sigma", format!("needs {} entries (dim x noise), got {}", dim * noise, sigma.len())));
            }
            if u0.len() != dim {
                e.push(ConfigError::field("simulate.model.u0", format!("needs {dim} entries, got {}", u0.len())));
            }
            all_finite(e, "simulate.model.u0", u0);
            for (i, c) in drift.iter().enumerate() {
                check_expr(e, &format!("simulate.model.drift[{i}]"), &c.0);
            }
            for (i, c) in sigma.iter().enumerate() {
                check_expr(e, &format!("simulate.model.sigma[{i}]"), &c.0);
            }
        }
        Model::Special { x0, v0, .. } | Model::General { x0, v0, .. } => {
            all_finite(e, "simulate.model.x0", x0);
            all_finite(e, "simulate.model.v0", v0);
        }
    }
}

/// Parses a configuration, folding schema errors into one [`Error::Config`].
pub fn load_config(text: &str) -> Result<RunConfig> {
    parse_config(text).map_err(|errs| Error::Config(errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn below(name: &str, value: f64, tolerance: f64) -> Self {
        CheckOutcome { name: name.into(), pass: value <= tolerance, value, tolerance, detail: format!("{value:.3e} <= {tolerance:.1e}") }
    }

    fn above(name: &str, value: f64, tolerance: f64) -> Self {
        CheckOutcome { name: name.into(), pass: value >= tolerance, value, tolerance, detail: format!("{value:.3e} >= {tolerance:.1e}") }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub bytes: usize,
    pub sha256: String,
}

/// What a run did; written as `report.json` beside the artifacts it lists.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub command: Command,
    pub config_sha256: String,
    pub seed: u64,
    pub derivative_mode: DerivativeMode,
    pub threads: usize,
    pub wall_seconds: f64,
    pub checks: Vec<CheckOutcome>,
    pub residuals: Value,
    pub artifacts: Vec<ArtifactEntry>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            EXIT_CHECK_FAILURE
        }
    }
}

/// A finished run: the report and the artifact bytes it describes.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub files: Vec<(String, Vec<u8>)>,
}

impl RunOutput {
    /// Writes every artifact and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, bytes) in &self.files {
            write_artifact(&dir.join(name), bytes)?;
        }
        let mut report = to_json(&self.report)?;
        report.push('\n');
        write_artifact(&dir.join("report.json"), report.as_bytes())?;
        Ok(())
    }
}

#[derive(Default)]
struct Outcome {
    files: Vec<(String, Vec<u8>)>,
    checks: Vec<CheckOutcome>,
    residuals: Value,
}

impl Outcome {
    fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents.into_bytes()));
    }

    fn json(&mut self, name: &str, v: &Value) -> Result<()> {
        let mut s = to_json(v)?;
        s.push('\n');
        self.file(name, s);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dispatch

/// Runs `f` on a pool of `threads` workers, or on the global pool when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Executes the configured command and any named acceptance checks.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let mut out = match cfg.command {
        Command::GeometryCheck => geometry_check(cfg)?,
        Command::Solve => solve(cfg)?,
        Command::Simulate => simulate(cfg)?,
        Command::FpEvolve => fp_evolve(cfg)?,
        Command::Ensemble => ensemble(cfg)?,
    };
    for name in &cfg.checks {
        let results = if name == "all" { checks::run_all(cfg.seed) } else { vec![checks::run_check(name, cfg.seed)?] };
        for r in results {
            out.checks.push(CheckOutcome { name: r.name.to_string(), pass: r.pass, value: r.seconds, tolerance: r.budget, detail: r.summary });
        }
    }
    let artifacts = out.files.iter().map(|(f, b)| ArtifactEntry { file: f.clone(), bytes: b.len(), sha256: sha256_hex(b) }).collect();
    let report = RunReport {
        command: cfg.command,
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        derivative_mode: cfg.derivative_mode(),
        threads: rayon::current_num_threads(),
        wall_seconds: start.elapsed().as_secs_f64(),
        checks: out.checks,
        residuals: out.residuals,
        artifacts,
    };
    Ok(RunOutput { report, files: out.files })
}

fn geometry_check(cfg: &RunConfig) -> Result<Outcome> {
    let spec = cfg.metric.spec(cfg.derivative_mode());
    let names = ["connection", "torsion", "anholonomy", "distortion", "levi_civita", "metricity"];
    let mut header = vec!["point", "x1", "x2", "t", "y"];
    header.extend(names);
    let mut csv = Csv::new(&header);
    let mut worst = [0.0f64; 6];
    for (i, u) in cfg.geometry.points.iter().enumerate() {
        let p = ChartPoint::from_coords(*u)?;
        let c = canonical_dconnection(&spec, &p)?;
        let vals = [
            max_abs3(&c.gamma),
            max_abs3(&c.torsion),
            max_abs3(&c.anholonomy),
            max_abs3(&distortion(&spec, &p)?),
            max_abs3(&levi_civita(&spec, &p)?),
            max_abs3(&metric_covariant_derivative(&spec, &p)?),
        ];
        for k in 0..6 {
            worst[k] = worst[k].max(vals[k]);
        }
        let mut row = u.to_vec();
        row.extend(vals);
        csv.row_with_ids(&[i as u64], &row);
    }
    let mut out = Outcome::default();
    out.file("geometry.csv", csv.finish());
    let tol = cfg.tolerances.geometry;
    out.checks.push(CheckOutcome::below("metricity", worst[5], tol));
    if cfg.geometry.expect_flat {
        out.checks.push(CheckOutcome::below("flat", worst[..4].iter().cloned().fold(0.0, f64::max), tol));
    }
    out.residuals = Value::Object(names.iter().zip(worst).map(|(n, w)| (n.to_string(), json!(w))).collect());
    Ok(out)
}

fn generate(family: &FamilyData, grid: &Grid3, opts: &SolveOptions) -> Result<AnsatzSolution> {
    match family {
        FamilyData::A(d) => generate_family_a(d, grid, opts),
        FamilyData::Vacuum(d) => generate_family_vacuum(d, grid, opts),
        FamilyData::H3const(d) => generate_family_h3const(d, grid, opts),
        FamilyData::Constphi(d) => generate_family_constphi(d, grid, opts),
    }
}

fn solve(cfg: &RunConfig) -> Result<Outcome> {
    let (grid, s) = (cfg.grid.as_ref().expect("validated"), cfg.solve.as_ref().expect("validated"));
    let mode = cfg.derivative_mode();
    let (family, _) = s.generator.family_data(&s.n);
    let sol = generate(&family, grid, &s.options(mode))?;
    let rep = residuals(&sol, mode)?;

    let mut csv = Csv::new(&["x1", "x2", "t", "r1", "r2", "r3_1", "r3_2", "r4_1", "r4_2"]);
    let nt = grid.t.points;
    for p in 0..grid.len() {
        let u = grid.point(p, 0.0);
        csv.row(&[u[0], u[1], u[2], rep.r1[p / nt], rep.r2[p], rep.r3[0][p], rep.r3[1][p], rep.r4[0][p], rep.r4[1][p]]);
    }
    let mut out = Outcome::default();
    out.file("solution.csv", sol.to_csv());
    out.file("residuals.csv", csv.finish());
    let tolerances = json!({"residual": cfg.tolerances.residual, "psi": s.psi.tol, "lc": s.lc_tol});
    out.json("solution.json", &sol.metadata(tolerances, Some(cfg.seed)))?;
    out.checks.push(CheckOutcome::below("residuals", rep.max_234(), cfg.tolerances.residual));
    let mut norms = Map::new();
    for (i, n) in rep.norms.iter().enumerate() {
        norms.insert(format!("r{}", i + 1), json!({"max": n.max, "l2": n.l2}));
    }
    if s.require_lc {
        let lc = lc_constraint_check(&sol, s.lc_tol, mode);
        let worst = lc.max.iter().cloned().fold(0.0, f64::max);
        let mut c = CheckOutcome::below("levi-civita", worst, s.lc_tol);
        c.pass = lc.pass;
        c.detail = format!("{} (dominant {})", c.detail, lc.dominant);
        out.checks.push(c);
        norms.insert("lc".into(), json!({"max": lc.max, "dominant": lc.dominant}));
    }
    out.residuals = Value::Object(norms);
    Ok(out)
}

fn padded(u: &[f64]) -> [f64; 4] {
    let mut p = [0.0; 4];
    p[..u.len()].copy_from_slice(u);
    p
}

/// `du = sigma dW + drift dtau` with coefficients read from the first `dim` chart slots.
fn generic_system(drift: &[Coef], sigma: &[Coef], noise: usize, interpretation: Interpretation) -> SdeSystem {
    let dim = drift.len();
    let b: Arc<Vec<Expr>> = Arc::new(drift.iter().map(|c| c.0.clone()).collect());
    let s: Arc<Vec<Expr>> = Arc::new(sigma.iter().map(|c| c.0.clone()).collect());
    let s2 = s.clone();
    let drift_fn: StateFn = Arc::new(move |_, u| b.iter().map(|e| e.value(&padded(u))).collect());
    let sigma_fn: StateFn = Arc::new(move |_, u| s.iter().map(|e| e.value(&padded(u))).collect());
    let grad: StateFn = Arc::new(move |_, u| {
        let m = s2.len();
        let mut out = vec![0.0; dim * m];
        for (i, e) in s2.iter().enumerate() {
            let j = e.eval_jet(&padded(u));
            for beta in 0..dim {
                out[beta * m + i] = j.g[beta];
            }
        }
        out
    });
    SdeSystem::new(dim, noise, sigma_fn, drift_fn, interpretation).with_sigma_grad(grad)
}

fn simulate(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.simulate.as_ref().expect("validated");
    let sampling = Sampling { paths: s.paths, first_id: 0, save_every: s.save_every };
    let wiener = |dim| WienerConfig::new(s.rho, dim, cfg.seed, s.dt, s.steps);
    let (ens, relativistic): (PathEnsemble, bool) = match &s.model {
        Model::Generic { interpretation, drift, sigma, noise, u0 } => {
            let sys = generic_system(drift, sigma, *noise, *interpretation);
            let ens = match interpretation {
                Interpretation::Ito => integrate_ito(&sys, u0, &wiener(*noise), &sampling)?,
                Interpretation::Stratonovich => integrate_stratonovich(&sys, u0, &wiener(*noise), &sampling)?,
            };
            (ens, false)
        }
        Model::Special { x0, v0, options } => (sr_relativistic_diffusion(&RelativisticState::new(*x0, *v0), None, &wiener(3), &sampling, options)?, true),
        Model::General { x0, v0, options } => {
            let spec = cfg.metric.spec(cfg.derivative_mode());
            (gr_relativistic_diffusion(&spec, &RelativisticState::new(*x0, *v0), None, &wiener(3), &sampling, options)?, true)
        }
    };
    let mut out = Outcome::default();
    out.file("paths.csv", ens.to_csv());
    out.json("paths.json", &ens.metadata())?;
    out.checks.push(CheckOutcome::below("paths", ens.failed() as f64, 0.0));
    let m = ens.max_monitors();
    if relativistic {
        out.checks.push(CheckOutcome::below("mass-shell", m.constraint, cfg.tolerances.constraint));
        out.checks.push(CheckOutcome::below("fiber-gram", m.gram, cfg.tolerances.constraint));
    }
    out.residuals = json!({"failed": ens.failed(), "constraint": m.constraint, "gram": m.gram, "gram_reortho": m.gram_reortho});
    Ok(out)
}

fn fp_evolve(cfg: &RunConfig) -> Result<Outcome> {
    let fp = cfg.fp.as_ref().expect("validated");
    let spec = cfg.metric.spec(cfg.derivative_mode());
    let phi0 = match &fp.initial {
        InitialDensity::PointMass { at } => DensityGrid::point_mass(&spec, &fp.lattice, at)?,
        InitialDensity::Density { f } => DensityGrid::from_fn(&spec, &fp.lattice, |u| f.0.value(u))?,
    };
    let drift_fn: Option<Box<AdaptedDrift>> = fp.drift.clone().map(|d| {
        Box::new(move |u: &[f64; 4]| [d[0].0.value(u), d[1].0.value(u), d[2].0.value(u), d[3].0.value(u)]) as Box<AdaptedDrift>
    });
    let dens = fokker_planck_evolve(&spec, drift_fn.as_deref(), fp.rho, &phi0, fp.tau, fp.dt)?;
    let m0 = dens.mass_history[0][1];
    let rel = (dens.mass() - m0).abs() / m0.abs().max(f64::MIN_POSITIVE);
    let mut out = Outcome::default();
    out.file("density.csv", dens.to_csv());
    out.json("density.json", &dens.metadata("rk2"))?;
    out.checks.push(CheckOutcome::below("mass", rel, cfg.tolerances.mass));
    out.residuals = json!({"mass_change": rel, "min_before_clamp": dens.min_before_clamp, "clamped": dens.clamped});
    Ok(out)
}

fn ensemble(cfg: &RunConfig) -> Result<Outcome> {
    let (grid, s, en) =
        (cfg.grid.as_ref().expect("validated"), cfg.solve.as_ref().expect("validated"), cfg.ensemble.as_ref().expect("validated"));
    let mode = cfg.derivative_mode();
    let (family, base_phi) = s.generator.family_data(&s.n);
    let rcfg =
        RandomGeneratorConfig { base_phi, varpi: en.varpi, tilde_source: en.tilde_source.clone(), realizations: en.realizations, seed: cfg.seed };
    let opts = EnsembleOptions { solve: s.options(mode), accept_tol: en.accept_tol, lc_tol: en.lc_tol, keep_jets: false };
    let ens = generate_ensemble(&family, &rcfg, grid, &opts)?;
    let mut out = Outcome::default();
    out.json("ensemble.json", &ens.summary(&en.probes)?)?;
    out.file("realizations.csv", ens.to_csv());
    out.checks.push(CheckOutcome::above("acceptance", ens.acceptance_rate(), en.min_acceptance));
    out.residuals = json!({"worst_accepted": ens.worst_residual(), "accepted": ens.accepted(), "realizations": ens.realizations.len()});
    Ok(out)
}

/// Flat-space configuration accepted by [`parse_config`] with every default filled.
pub fn minimal_geometry_config() -> RunConfig {
    RunConfig {
        command: Command::GeometryCheck,
        seed: 0,
        out: None,
        derivatives: vec![DerivativeRequest::Analytic],
        tolerances: Tolerances::default(),
        metric: MetricConfig::default(),
        geometry: GeometryConfig::default(),
        grid: None,
        solve: None,
        simulate: None,
        fp: None,
        ensemble: None,
        checks: vec![],
    }
}
