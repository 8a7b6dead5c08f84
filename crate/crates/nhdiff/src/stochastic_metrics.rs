//! Stochastic metric ensembles.
//!
//! A realization randomizes one generator input, `phi_ = phi + varpi phi~`,
//! and rebuilds the solution with the matching ansatz generator. `phi~` comes
//! from an h-diffusion evolved to each `t`-slice, a correlated Gaussian field,
//! or a Brownian path in `t`.

use crate::ansatz::{
    generate_family_a, generate_family_constphi, generate_family_h3const, generate_family_vacuum, lc_constraint_check, residuals,
    AnsatzSolution, ConstPhiData, Family, GeneratingData, H3ConstData, Input, Norms, SolveOptions, VacuumData, LC_NAMES, LC_TOL,
};
use crate::field::{DerivativeMode, Field, Jet};
use crate::fokker_planck::h_diffusion_slices;
use crate::grid::{fd_locals, Grid3, GridField, GridInterp};
use crate::rng::{derive_seed, NormalStream};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::sync::Arc;

/// Initial profile `f0(x)` of the h-diffusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialField {
    /// `amplitude exp(-|x - center|^2 / (2 width^2))`.
    Bump { center: [f64; 2], width: f64, amplitude: f64 },
    /// A bump centred uniformly at random in the middle half of the h-domain.
    RandomBump { width: f64, amplitude: f64 },
    /// Gaussian field with correlation `exp(-|dx1|/l - |dx2|/l)`.
    Gaussian { amplitude: f64, correlation_length: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TildeSource {
    /// `phi~(x, t) = f(tau = t - t0, x)` for `f_tau = (rho/2) e^{-psi} Laplacian f`.
    ///
    /// `psi` holds one value per h-node; `None` means `psi = 0`.
    HDiffusion { initial: InitialField, rho: f64, psi: Option<Vec<f64>> },
    /// Gaussian field on the `(x1, x2, t)` grid with correlation `exp(-(|dx1| + |dx2| + |dt|)/l)`.
    RandomSource { amplitude: f64, correlation_length: f64 },
    /// `phi~(x, t) = W(t - t0)`, one Wiener path with variance `rho` per unit `t` shared by all columns.
    Brownian { rho: f64 },
}

/// Randomization of one generator input.
///
/// `base_phi` is the sure input being randomized: `phi` for family A, `h3` for
/// the vacuum family, `f` for the constant-`phi` family and the initial `h4`
/// for the `h3 = const` family.
#[derive(Clone)]
pub struct RandomGeneratorConfig {
    pub base_phi: Input,
    pub varpi: f64,
    pub tilde_source: TildeSource,
    pub realizations: usize,
    pub seed: u64,
}

impl RandomGeneratorConfig {
    pub fn validate(&self, grid: &Grid3) -> Result<()> {
        if !(self.varpi >= 0.0 && self.varpi.is_finite()) {
            return Err(Error::InvalidInput(format!("varpi must be finite and nonnegative, got {}", self.varpi)));
        }
        if self.realizations == 0 {
            return Err(Error::InvalidInput("need at least one realization".into()));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} must be positive, got {v}")))
            }
        };
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} must be finite")))
            }
        };
        match &self.tilde_source {
            TildeSource::HDiffusion { initial, rho, psi } => {
                if !(*rho >= 0.0 && rho.is_finite()) {
                    return Err(Error::InvalidInput(format!("rho must be finite and nonnegative, got {rho}")));
                }
                if let Some(p) = psi {
                    if p.len() != grid.columns() {
                        return Err(Error::InvalidInput(format!("psi has {} values for {} h-nodes", p.len(), grid.columns())));
                    }
                }
                match initial {
                    InitialField::Bump { center, width, amplitude } => {
                        positive("width", *width)?;
                        finite("amplitude", *amplitude)?;
                        finite("center", center[0] + center[1])?;
                    }
                    InitialField::RandomBump { width, amplitude } => {
                        positive("width", *width)?;
                        finite("amplitude", *amplitude)?;
                    }
                    InitialField::Gaussian { amplitude, correlation_length } => {
                        positive("correlation_length", *correlation_length)?;
                        finite("amplitude", *amplitude)?;
                    }
                }
            }
            TildeSource::RandomSource { amplitude, correlation_length } => {
                positive("correlation_length", *correlation_length)?;
                finite("amplitude", *amplitude)?;
            }
            TildeSource::Brownian { rho } => {
                if !(*rho >= 0.0 && rho.is_finite()) {
                    return Err(Error::InvalidInput(format!("rho must be finite and nonnegative, got {rho}")));
                }
            }
        }
        Ok(())
    }

    /// Seed of realization `r`.
    pub fn sub_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, r as u64)
    }
}

/// Stationary AR(1) filter along one axis: unit variance, correlation `a^|k|`.
fn ar1_along(values: &mut [f64], dims: &[usize], axis: usize, a: f64) {
    let stride: usize = dims[axis + 1..].iter().product();
    let n = dims[axis];
    let c = (1.0 - a * a).sqrt();
    for start in 0..values.len() {
        if (start / stride) % n != 0 {
            continue;
        }
        for k in 1..n {
            let p = start + k * stride;
            values[p] = a * values[p - stride] + c * values[p];
        }
    }
}

/// Unit-variance Gaussian field with separable exponential correlation on a node lattice.
fn exponential_field(stream: &mut NormalStream, dims: &[usize], steps: &[f64], length: f64) -> Vec<f64> {
    let mut v = vec![0.0; dims.iter().product()];
    stream.fill(&mut v, 1.0);
    for a in 0..dims.len() {
        ar1_along(&mut v, dims, a, (-steps[a] / length).exp());
    }
    v
}

/// `phi~` on the grid for realization `r`.
pub fn tilde_field(cfg: &RandomGeneratorConfig, grid: &Grid3, r: usize) -> Result<Vec<f64>> {
    cfg.validate(grid)?;
    let mut stream = NormalStream::new(cfg.sub_seed(r), 0);
    let [n1, n2, nt] = grid.dims();
    let ts = grid.t.coords();
    match &cfg.tilde_source {
        TildeSource::HDiffusion { initial, rho, psi } => {
            let h = grid.h_grid();
            let xs = [grid.x1.coords(), grid.x2.coords()];
            let bump = |c: [f64; 2], w: f64, amp: f64| -> Vec<f64> {
                let mut f = Vec::with_capacity(n1 * n2);
                for x in &xs[0] {
                    for y in &xs[1] {
                        let d2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
                        f.push(amp * (-d2 / (2.0 * w * w)).exp());
                    }
                }
                f
            };
            let f0 = match initial {
                InitialField::Bump { center, width, amplitude } => bump(*center, *width, *amplitude),
                InitialField::RandomBump { width, amplitude } => {
                    let c = [
                        grid.x1.start + (0.25 + 0.5 * stream.uniform()) * (grid.x1.end - grid.x1.start),
                        grid.x2.start + (0.25 + 0.5 * stream.uniform()) * (grid.x2.end - grid.x2.start),
                    ];
                    bump(c, *width, *amplitude)
                }
                InitialField::Gaussian { amplitude, correlation_length } => {
                    let steps = [grid.x1.step(), grid.x2.step()];
                    exponential_field(&mut stream, &[n1, n2], &steps, *correlation_length).into_iter().map(|v| amplitude * v).collect()
                }
            };
            let zero = vec![0.0; n1 * n2];
            let psi = psi.as_deref().unwrap_or(&zero);
            let taus: Vec<f64> = ts.iter().map(|t| t - ts[0]).collect();
            let slices = h_diffusion_slices(&h, psi, &f0, &taus, *rho)?;
            Ok((0..grid.len()).map(|p| slices[p % nt][p / nt]).collect())
        }
        TildeSource::RandomSource { amplitude, correlation_length } => {
            let v = exponential_field(&mut stream, &[n1, n2, nt], &grid.steps(), *correlation_length);
            Ok(v.into_iter().map(|x| amplitude * x).collect())
        }
        TildeSource::Brownian { rho } => {
            let mut w = vec![0.0; nt];
            let sd = (rho * grid.t.step()).sqrt();
            for k in 1..nt {
                w[k] = w[k - 1] + sd * stream.normal();
            }
            Ok((0..grid.len()).map(|p| w[p % nt]).collect())
        }
    }
}

/// `phi_ = phi + varpi phi~` for realization `r`.
///
/// With `varpi = 0` the sure input is returned unchanged. Otherwise the result
/// is grid data whose jets add `varpi` times finite-difference jets of `phi~`
/// to the jets of `phi`.
pub fn random_generating_function(cfg: &RandomGeneratorConfig, grid: &Grid3, r: usize, mode: DerivativeMode) -> Result<Input> {
    cfg.validate(grid)?;
    if cfg.varpi == 0.0 {
        return Ok(cfg.base_phi.clone());
    }
    let tilde = tilde_field(cfg, grid, r)?;
    let base = cfg.base_phi.sample(grid, mode, "phi")?;
    let base = base.locals(grid, mode);
    let tj = fd_locals(grid, &tilde);
    let jets: Vec<Jet> = base.iter().zip(&tj).map(|(b, t)| *b + t.scale(cfg.varpi)).collect();
    Ok(Input::Grid(GridField::from_jets(jets)))
}

/// `int h3 o dtau` from `t0` per `x`-column: cumulative midpoint sums
/// `sum (h3_k + h3_{k+1})/2 dt` of node values.
pub fn stratonovich_metric_integral(h3: &[f64], grid: &Grid3) -> Result<Vec<f64>> {
    if h3.len() != grid.len() {
        return Err(Error::InvalidInput(format!("{} values for a grid of {} nodes", h3.len(), grid.len())));
    }
    let nt = grid.t.points;
    let dt = grid.t.step();
    let mut out = vec![0.0; h3.len()];
    for c in 0..grid.columns() {
        let b = c * nt;
        for k in 1..nt {
            out[b + k] = out[b + k - 1] + 0.5 * dt * (h3[b + k - 1] + h3[b + k]);
        }
    }
    Ok(out)
}

/// Cumulative sums `sum_j f_j (x_{j+1} - x_j)` with `f_j` taken at the midpoint of step `j`.
pub fn stratonovich_cumulative(f_mid: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != f_mid.len() + 1 {
        return Err(Error::InvalidInput(format!("{} midpoint values for {} path nodes", f_mid.len(), x.len())));
    }
    let mut out = Vec::with_capacity(x.len());
    out.push(0.0);
    for j in 0..f_mid.len() {
        out.push(out[j] + f_mid[j] * (x[j + 1] - x[j]));
    }
    Ok(out)
}

/// RMS error of midpoint sums for `int W o dW` against `W(T)^2 / 2` under step halving.
#[derive(Clone, Debug, Serialize)]
pub struct StratonovichStudy {
    pub steps: Vec<usize>,
    pub rms: Vec<f64>,
    /// Least-squares slope of `ln rms` against `ln dt`.
    pub rate: f64,
    /// Batch-means standard error of `rate`.
    pub rate_stderr: f64,
}

fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Samples `paths` Wiener paths on `[0, t_end]` at twice the finest resolution
/// `coarse_steps * 2^refinements`, so every level reads its midpoints off the same path.
pub fn stratonovich_identity_study(seed: u64, paths: usize, t_end: f64, coarse_steps: usize, refinements: usize) -> Result<StratonovichStudy> {
    if paths < 20 || coarse_steps == 0 || !(t_end > 0.0) {
        return Err(Error::InvalidInput("need at least 20 paths, one step and t_end > 0".into()));
    }
    let levels = refinements + 1;
    let fine = 2 * coarse_steps << refinements;
    let h = t_end / fine as f64;
    let sq: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut s = NormalStream::new(seed, p as u64);
            let mut w = vec![0.0; fine + 1];
            for k in 1..=fine {
                w[k] = w[k - 1] + h.sqrt() * s.normal();
            }
            let exact = 0.5 * w[fine] * w[fine];
            (0..levels)
                .map(|l| {
                    let n = coarse_steps << l;
                    let stride = fine / n;
                    let x: Vec<f64> = (0..=n).map(|j| w[j * stride]).collect();
                    let mid: Vec<f64> = (0..n).map(|j| w[j * stride + stride / 2]).collect();
                    let sum = stratonovich_cumulative(&mid, &x).expect("lengths match")[n];
                    (sum - exact).powi(2)
                })
                .collect()
        })
        .collect();
    let steps: Vec<usize> = (0..levels).map(|l| coarse_steps << l).collect();
    let ln_dt: Vec<f64> = steps.iter().map(|n| (t_end / *n as f64).ln()).collect();
    let rms_of = |rows: &[Vec<f64>]| -> Vec<f64> {
        (0..levels).map(|l| (rows.iter().map(|r| r[l]).sum::<f64>() / rows.len() as f64).sqrt()).collect()
    };
    let rms = rms_of(&sq);
    let rate = fit_slope(&ln_dt, &rms.iter().map(|r| r.ln()).collect::<Vec<_>>());
    let batches = 20;
    let size = paths / batches;
    let rates: Vec<f64> = (0..batches)
        .map(|b| {
            let r = rms_of(&sq[b * size..(b + 1) * size]);
            fit_slope(&ln_dt, &r.iter().map(|v| v.ln()).collect::<Vec<_>>())
        })
        .collect();
    let est = mean_stderr(&rates);
    Ok(StratonovichStudy { steps, rms, rate, rate_stderr: est.1 })
}

/// Sample mean and standard error of the mean.
fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// Ensembles

/// Sure data of the family being randomized; the slot named by
/// [`RandomGeneratorConfig::base_phi`] is overwritten per realization.
#[derive(Clone)]
pub enum FamilyData {
    A(GeneratingData),
    Vacuum(VacuumData),
    H3const(H3ConstData),
    Constphi(ConstPhiData),
}

impl FamilyData {
    pub fn family(&self) -> Family {
        match self {
            FamilyData::A(_) => Family::A,
            FamilyData::Vacuum(_) => Family::Vacuum,
            FamilyData::H3const(_) => Family::H3const,
            FamilyData::Constphi(_) => Family::Constphi,
        }
    }

    fn generate(&self, input: Input, grid: &Grid3, opts: &SolveOptions) -> Result<AnsatzSolution> {
        match self {
            FamilyData::A(d) => generate_family_a(&GeneratingData { phi: input, ..d.clone() }, grid, opts),
            FamilyData::Vacuum(d) => generate_family_vacuum(&VacuumData { h3: input, ..d.clone() }, grid, opts),
            FamilyData::Constphi(d) => generate_family_constphi(&ConstPhiData { f: input, ..d.clone() }, grid, opts),
            FamilyData::H3const(d) => {
                let h4_init: Field = match input {
                    Input::Field(f) => f,
                    Input::Grid(g) => Arc::new(GridInterp::new(*grid, &g)),
                };
                generate_family_h3const(&H3ConstData { h4_init, ..d.clone() }, grid, opts)
            }
        }
    }
}

#[derive(Clone)]
pub struct EnsembleOptions {
    pub solve: SolveOptions,
    /// Residual max-norm of eqs. 2-4 above which a realization is rejected.
    pub accept_tol: f64,
    pub lc_tol: f64,
    /// Keep derivative jets of stored solutions; values only by default.
    pub keep_jets: bool,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions { solve: SolveOptions::default(), accept_tol: 1e-4, lc_tol: LC_TOL, keep_jets: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LcSummary {
    pub pass: bool,
    pub max: [f64; 4],
    pub dominant: &'static str,
}

#[derive(Clone, Debug)]
pub struct Realization {
    pub index: usize,
    pub seed: u64,
    pub solution: Option<AnsatzSolution>,
    /// Max-norms of the residuals of eqs. 1-4.
    pub residuals: Option<[Norms; 4]>,
    pub lc: Option<LcSummary>,
    pub rejected: Option<String>,
}

impl Realization {
    pub fn accepted(&self) -> bool {
        self.rejected.is_none()
    }

    pub fn residual_max_234(&self) -> Option<f64> {
        self.residuals.as_ref().map(|n| n[1].max.max(n[2].max).max(n[3].max))
    }
}

#[derive(Clone, Debug)]
pub struct MetricEnsemble {
    pub family: Family,
    pub varpi: f64,
    pub seed: u64,
    pub accept_tol: f64,
    pub realizations: Vec<Realization>,
}

fn build_realization(family: &FamilyData, cfg: &RandomGeneratorConfig, grid: &Grid3, opts: &EnsembleOptions, r: usize) -> Realization {
    let seed = cfg.sub_seed(r);
    let mut out = Realization { index: r, seed, solution: None, residuals: None, lc: None, rejected: None };
    let mode = opts.solve.mode;
    let sol = random_generating_function(cfg, grid, r, mode).and_then(|input| family.generate(input, grid, &opts.solve));
    let mut sol = match sol {
        Ok(s) => s,
        Err(e) => {
            out.rejected = Some(e.to_string());
            return out;
        }
    };
    match residuals(&sol, mode) {
        Ok(rep) => {
            let worst = rep.max_234();
            out.residuals = Some(rep.norms);
            if !(worst < opts.accept_tol) {
                out.rejected = Some(format!("residual max-norm {worst:e} exceeds {:e}", opts.accept_tol));
            }
        }
        Err(e) => out.rejected = Some(e.to_string()),
    }
    let lc = lc_constraint_check(&sol, opts.lc_tol, mode);
    out.lc = Some(LcSummary { pass: lc.pass, max: lc.max, dominant: lc.dominant });
    if !opts.keep_jets {
        sol.strip();
    }
    out.solution = Some(sol);
    out
}

/// Builds `cfg.realizations` solutions from independent sub-seeds of `cfg.seed`.
///
/// Realizations are generated in parallel and stored in index order, so the
/// ensemble does not depend on the thread count.
pub fn generate_ensemble(family: &FamilyData, cfg: &RandomGeneratorConfig, grid: &Grid3, opts: &EnsembleOptions) -> Result<MetricEnsemble> {
    cfg.validate(grid)?;
    let realizations: Vec<Realization> =
        (0..cfg.realizations).into_par_iter().map(|r| build_realization(family, cfg, grid, opts, r)).collect();
    if realizations.iter().all(|r| !r.accepted()) {
        let first = realizations[0].rejected.clone().unwrap_or_default();
        return Err(Error::InvalidInput(format!("all {} realizations rejected; first: {first}", realizations.len())));
    }
    Ok(MetricEnsemble { family: family.family(), varpi: cfg.varpi, seed: cfg.seed, accept_tol: opts.accept_tol, realizations })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficient {
    H3,
    H4,
    W1,
    W2,
    N1,
    N2,
}

impl Coefficient {
    pub const ALL: [Coefficient; 6] = [Coefficient::H3, Coefficient::H4, Coefficient::W1, Coefficient::W2, Coefficient::N1, Coefficient::N2];

    pub fn of(self, sol: &AnsatzSolution) -> &[f64] {
        match self {
            Coefficient::H3 => &sol.h3.values,
            Coefficient::H4 => &sol.h4.values,
            Coefficient::W1 => &sol.w[0].values,
            Coefficient::W2 => &sol.w[1].values,
            Coefficient::N1 => &sol.n[0].values,
            Coefficient::N2 => &sol.n[1].values,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Coefficient::H3 => "h3",
            Coefficient::H4 => "h4",
            Coefficient::W1 => "w1",
            Coefficient::W2 => "w2",
            Coefficient::N1 => "n1",
            Coefficient::N2 => "n2",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Statistics {
    pub coefficient: Coefficient,
    pub points: Vec<usize>,
    pub samples: usize,
    pub mean: Vec<f64>,
    /// Standard error of each mean from batch means.
    pub stderr: Vec<f64>,
    /// Bessel-corrected covariance `k(p, q)` between the requested points.
    pub covariance: Vec<Vec<f64>>,
}

impl Statistics {
    pub fn variance(&self) -> Vec<f64> {
        (0..self.points.len()).map(|i| self.covariance[i][i]).collect()
    }
}

/// Batches used for standard errors of ensemble means.
pub const STAT_BATCHES: usize = 10;

/// Mean, covariance and standard errors of one coefficient over accepted realizations.
///
/// Standard errors use [`STAT_BATCHES`] equal batch means when there are at
/// least two realizations per batch and the plain estimate otherwise.
pub fn ensemble_statistics(ens: &MetricEnsemble, coefficient: Coefficient, points: &[usize]) -> Result<Statistics> {
    let rows: Vec<Vec<f64>> = ens
        .realizations
        .iter()
        .filter(|r| r.accepted())
        .filter_map(|r| r.solution.as_ref())
        .map(|s| {
            let v = coefficient.of(s);
            points.iter().map(|&p| v.get(p).copied().ok_or_else(|| Error::InvalidInput(format!("point {p} outside the grid")))).collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("statistics need at least 2 accepted realizations, have {n}")));
    }
    let m = points.len();
    let mean: Vec<f64> = (0..m).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n as f64).collect();
    let mut covariance = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in a..m {
            let c = rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1) as f64;
            covariance[a][b] = c;
            covariance[b][a] = c;
        }
    }
    let stderr = if n >= 2 * STAT_BATCHES {
        let size = n / STAT_BATCHES;
        (0..m)
            .map(|i| {
                let bm: Vec<f64> = (0..STAT_BATCHES).map(|b| rows[b * size..(b + 1) * size].iter().map(|r| r[i]).sum::<f64>() / size as f64).collect();
                mean_stderr(&bm).1
            })
            .collect()
    } else {
        (0..m).map(|i| (covariance[i][i] / n as f64).sqrt()).collect()
    };
    Ok(Statistics { coefficient, points: points.to_vec(), samples: n, mean, stderr, covariance })
}

#[derive(Clone, Debug, Serialize)]
pub struct LcClassification {
    pub index: usize,
    pub lc_compatible: bool,
    pub dominant: &'static str,
    pub max: [f64; 4],
}

#[derive(Clone, Debug, Serialize)]
pub struct LcTransitionReport {
    pub realizations: Vec<LcClassification>,
    pub compatible: usize,
    pub distorted: usize,
    /// How often each constraint was the dominant violation among distorted realizations.
    pub dominant_counts: [(&'static str, usize); 4],
}

/// Levi-Civita classification of every accepted realization.
pub fn lc_transition_report(ens: &MetricEnsemble) -> LcTransitionReport {
    let realizations: Vec<LcClassification> = ens
        .realizations
        .iter()
        .filter(|r| r.accepted())
        .filter_map(|r| r.lc.as_ref().map(|lc| LcClassification { index: r.index, lc_compatible: lc.pass, dominant: lc.dominant, max: lc.max }))
        .collect();
    let compatible = realizations.iter().filter(|c| c.lc_compatible).count();
    let dominant_counts =
        std::array::from_fn(|i| (LC_NAMES[i], realizations.iter().filter(|c| !c.lc_compatible && c.dominant == LC_NAMES[i]).count()));
    LcTransitionReport { distorted: realizations.len() - compatible, compatible, realizations, dominant_counts }
}

impl MetricEnsemble {
    pub fn accepted(&self) -> usize {
        self.realizations.iter().filter(|r| r.accepted()).count()
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted() as f64 / self.realizations.len() as f64
    }

    /// Largest residual max-norm of eqs. 2-4 among accepted realizations.
    pub fn worst_residual(&self) -> f64 {
        self.realizations.iter().filter(|r| r.accepted()).filter_map(|r| r.residual_max_234()).fold(0.0, f64::max)
    }

    /// Largest `|coefficient - sure|` over accepted realizations and nodes.
    pub fn max_deviation(&self, sure: &AnsatzSolution) -> f64 {
        let mut m: f64 = 0.0;
        for s in self.realizations.iter().filter(|r| r.accepted()).filter_map(|r| r.solution.as_ref()) {
            for c in Coefficient::ALL {
                for (a, b) in c.of(s).iter().zip(c.of(sure)) {
                    m = m.max((a - b).abs());
                }
            }
        }
        m
    }

    /// Acceptance counts, residual norms and statistics at the probe nodes.
    pub fn summary(&self, probes: &[usize]) -> Result<serde_json::Value> {
        let rejected: Vec<_> =
            self.realizations.iter().filter_map(|r| r.rejected.as_ref().map(|why| json!({"index": r.index, "seed": r.seed, "reason": why}))).collect();
        let mut stats = serde_json::Map::new();
        if self.accepted() >= 2 && !probes.is_empty() {
            for c in Coefficient::ALL {
                stats.insert(c.name().into(), serde_json::to_value(ensemble_statistics(self, c, probes)?).map_err(|e| Error::Config(e.to_string()))?);
            }
        }
        let lc = lc_transition_report(self);
        Ok(json!({
            "family": self.family,
            "varpi": self.varpi,
            "seed": self.seed,
            "realizations": self.realizations.len(),
            "accepted": self.accepted(),
            "accept_tol": self.accept_tol,
            "worst_residual": self.worst_residual(),
            "rejected": rejected,
            "lc": {"compatible": lc.compatible, "distorted": lc.distorted, "dominant_counts": lc.dominant_counts},
            "statistics": stats,
        }))
    }

    /// One row per realization.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,seed,accepted,r1,r2,r3,r4,lc_pass,lc_dominant,reason\r\n");
        for r in &self.realizations {
            let n = |i: usize| r.residuals.as_ref().map(|n| crate::io::fmt17(n[i].max)).unwrap_or_default();
            let (pass, dom) = r.lc.as_ref().map(|l| (l.pass.to_string(), l.dominant.to_string())).unwrap_or_default();
            let why = r.rejected.as_deref().unwrap_or("").replace('"', "\"\"");
            s.push_str(&format!("{},{},{},{},{},{},{},{},{},\"{}\"\r\n", r.index, r.seed, r.accepted(), n(0), n(1), n(2), n(3), pass, dom, why));
        }
        s
    }
}
