//! Decoupled Einstein system for the one-Killing-vector ansatz
//!
//! `g = e^psi (dx1^2 + dx2^2) + h3 e3 e3 + h4 e4 e4`,
//! `e3 = dt + w_i dx^i`, `e4 = dy + n_i dx^i`,
//!
//! with coefficients on an `(x1, x2, t)` lattice. Jet slots follow the chart
//! order `(x1, x2, t, y)`; nothing depends on `y`.
//!
//! The residuals are the Ricci components of the canonical d-connection:
//! `R^1_1 = -Upsilon_4`, `R^3_3 = -Upsilon_2`, `R_3k = 0`, `R_4k = 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{constant, field_jet, DerivativeMode, Field, Jet, JetError, ScalarField};
use crate::geometry::{MetricSpec, DEGENERACY_FLOOR};
use crate::grid::{along_axis, diff1, diff2, fd_locals, grid_diff, Grid2, Grid3, GridField, GridInterp};
use crate::io::{fmt17, Csv};
use crate::{Error, Result};

const T: usize = 2;

/// Default residual tolerance of the Levi-Civita constraint check.
pub const LC_TOL: f64 = 1e-8;

// ---------------------------------------------------------------------------
// h-metric: psi

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    #[default]
    FivePoint,
    /// Fourth-order compact nine-point scheme; needs equal spacings.
    Compact,
}

/// Which two-dimensional equation fixes `psi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HEquation {
    /// `psi_11 + psi_22 = 2 Upsilon_4`.
    #[default]
    Linear,
    /// `psi_11 + psi_22 = 2 Upsilon_4 e^psi`, the exact h-equation for `g1 = g2 = e^psi`.
    Conformal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsiOptions {
    pub omega: f64,
    pub tol: f64,
    pub max_sweeps: usize,
    pub stencil: Stencil,
    pub equation: HEquation,
}

impl Default for PsiOptions {
    fn default() -> Self {
        PsiOptions { omega: 1.9, tol: 1e-10, max_sweeps: 200_000, stencil: Stencil::FivePoint, equation: HEquation::Linear }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsiSolution {
    pub grid: Grid2,
    pub values: Vec<f64>,
    pub upsilon4: Vec<f64>,
    pub options: PsiOptions,
    pub sweeps: usize,
    /// Max-norm of the stencil residual at interior nodes.
    pub residual: f64,
}

fn sample2(f: &dyn ScalarField, grid: &Grid2) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    for i in 0..grid.x1.points {
        for j in 0..grid.x2.points {
            out.push(f.value(&[grid.x1.at(i), grid.x2.at(j), 0.0, 0.0]));
        }
    }
    out
}

struct PsiStencil<'a> {
    grid: &'a Grid2,
    opts: PsiOptions,
    /// `2 Upsilon_4` plus the compact-scheme correction.
    rhs: Vec<f64>,
    ups: &'a [f64],
}

impl PsiStencil<'_> {
    fn laplacian(&self, p: &[f64], i: usize, j: usize) -> f64 {
        let g = self.grid;
        let n2 = g.x2.points;
        let c = i * n2 + j;
        let (e, w, nn, s) = (p[c + n2], p[c - n2], p[c + 1], p[c - 1]);
        match self.opts.stencil {
            Stencil::FivePoint => {
                let h1 = g.x1.step();
                let h2 = g.x2.step();
                (e + w - 2.0 * p[c]) / (h1 * h1) + (nn + s - 2.0 * p[c]) / (h2 * h2)
            }
            Stencil::Compact => {
                let h = g.x1.step();
                let corners = p[c + n2 + 1] + p[c + n2 - 1] + p[c - n2 + 1] + p[c - n2 - 1];
                (4.0 * (e + w + nn + s) + corners - 20.0 * p[c]) / (6.0 * h * h)
            }
        }
    }

    fn diag(&self) -> f64 {
        let g = self.grid;
        match self.opts.stencil {
            Stencil::FivePoint => -2.0 / g.x1.step().powi(2) - 2.0 / g.x2.step().powi(2),
            Stencil::Compact => -20.0 / (6.0 * g.x1.step().powi(2)),
        }
    }

    /// Residual `L psi - F(psi)` and its derivative in `psi_c`.
    fn residual(&self, p: &[f64], i: usize, j: usize) -> (f64, f64) {
        let c = self.grid.index(i, j);
        let lap = self.laplacian(p, i, j);
        match self.opts.equation {
            HEquation::Linear => (lap - self.rhs[c], self.diag()),
            HEquation::Conformal => {
                let e = p[c].exp();
                (lap - 2.0 * self.ups[c] * e, self.diag() - 2.0 * self.ups[c] * e)
            }
        }
    }

    fn max_residual(&self, p: &[f64]) -> f64 {
        let g = self.grid;
        let mut m: f64 = 0.0;
        for i in 1..g.x1.points - 1 {
            for j in 1..g.x2.points - 1 {
                m = m.max(self.residual(p, i, j).0.abs());
            }
        }
        m
    }
}

fn psi_stencil<'a>(grid: &'a Grid2, ups: &'a [f64], opts: PsiOptions) -> Result<PsiStencil<'a>> {
    let mut rhs: Vec<f64> = ups.iter().map(|u| 2.0 * u).collect();
    if opts.stencil == Stencil::Compact {
        let (h1, h2) = (grid.x1.step(), grid.x2.step());
        if ((h1 - h2) / h1).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("compact stencil needs equal spacings, got {h1} and {h2}")));
        }
        if opts.equation == HEquation::Conformal {
            return Err(Error::InvalidInput("compact stencil supports only the linear h-equation".into()));
        }
        let n2 = grid.x2.points;
        let base = rhs.clone();
        for i in 1..grid.x1.points - 1 {
            for j in 1..n2 - 1 {
                let c = i * n2 + j;
                let lap = base[c + n2] + base[c - n2] + base[c + 1] + base[c - 1] - 4.0 * base[c];
                rhs[c] = base[c] + lap / 12.0;
            }
        }
    }
    Ok(PsiStencil { grid, opts, rhs, ups })
}

/// Solves the h-equation for `psi` by successive over-relaxation with Dirichlet data.
pub fn solve_psi(upsilon4: &dyn ScalarField, grid: &Grid2, boundary: &dyn ScalarField, opts: PsiOptions) -> Result<PsiSolution> {
    if grid.x1.points < 4 || grid.x2.points < 4 {
        return Err(Error::InvalidInput("psi grid must be at least 4x4".into()));
    }
    if !(opts.omega > 0.0 && opts.omega < 2.0) {
        return Err(Error::InvalidInput(format!("SOR factor {} outside (0, 2)", opts.omega)));
    }
    let ups = sample2(upsilon4, grid);
    if ups.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("upsilon4 on the psi grid".into()));
    }
    let bvals = sample2(boundary, grid);
    let mut p = vec![0.0; grid.len()];
    for i in 0..grid.x1.points {
        for j in 0..grid.x2.points {
            if grid.is_boundary(i, j) {
                let c = grid.index(i, j);
                if !bvals[c].is_finite() {
                    return Err(Error::NonFinite(format!("psi boundary value at node ({i}, {j})")));
                }
                p[c] = bvals[c];
            }
        }
    }
    let st = psi_stencil(grid, &ups, opts)?;
    let mut sweeps = 0;
    let mut res = st.max_residual(&p);
    while res >= opts.tol {
        if sweeps >= opts.max_sweeps {
            return Err(Error::NonConvergence(format!("psi SOR stopped after {sweeps} sweeps at residual {res:e}")));
        }
        for i in 1..grid.x1.points - 1 {
            for j in 1..grid.x2.points - 1 {
                let (r, d) = st.residual(&p, i, j);
                p[grid.index(i, j)] -= opts.omega * r / d;
            }
        }
        sweeps += 1;
        if sweeps % 8 == 0 || sweeps >= opts.max_sweeps {
            res = st.max_residual(&p);
            if !res.is_finite() {
                return Err(Error::NonConvergence("psi SOR diverged".into()));
            }
        }
    }
    Ok(PsiSolution { grid: *grid, values: p, upsilon4: ups, options: opts, sweeps, residual: res })
}

impl PsiSolution {
    /// Stencil residual of the solver's own discretization at every node (zero on the boundary).
    pub fn stencil_residuals(&self) -> Vec<f64> {
        let st = psi_stencil(&self.grid, &self.upsilon4, self.options).expect("options validated at solve time");
        let mut out = vec![0.0; self.grid.len()];
        for i in 1..self.grid.x1.points - 1 {
            for j in 1..self.grid.x2.points - 1 {
                out[self.grid.index(i, j)] = st.residual(&self.values, i, j).0;
            }
        }
        out
    }

    /// Discrete `psi_11 + psi_22` at interior nodes, as seen by the solver's stencil.
    fn discrete_laplacian(&self) -> Vec<f64> {
        let st = psi_stencil(&self.grid, &self.upsilon4, self.options).expect("options validated at solve time");
        let mut out = vec![0.0; self.grid.len()];
        for i in 1..self.grid.x1.points - 1 {
            for j in 1..self.grid.x2.points - 1 {
                let c = self.grid.index(i, j);
                out[c] = st.laplacian(&self.values, i, j) - (st.rhs[c] - 2.0 * self.upsilon4[c]);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Pointwise equations

fn bracket(h3: &Jet, h4: &Jet) -> f64 {
    h4.h[T][T] - h4.g[T] * h4.g[T] / (2.0 * h4.v) - h3.g[T] * h4.g[T] / (2.0 * h3.v)
}

/// h-equation residual for general `g1, g2` (slot 0 is the bullet, slot 1 the prime derivative).
pub fn eq1(g1: &Jet, g2: &Jet, upsilon4: f64) -> f64 {
    let b = g2.h[0][0] - g1.g[0] * g2.g[0] / (2.0 * g1.v) - g2.g[0] * g2.g[0] / (2.0 * g2.v) + g1.h[1][1]
        - g1.g[1] * g2.g[1] / (2.0 * g2.v)
        - g1.g[1] * g1.g[1] / (2.0 * g1.v);
    -b / (2.0 * g1.v * g2.v) + upsilon4
}

pub fn eq2(h3: &Jet, h4: &Jet, upsilon2: f64) -> f64 {
    -bracket(h3, h4) / (2.0 * h3.v * h4.v) + upsilon2
}

pub fn eq3(h3: &Jet, h4: &Jet, w: f64, k: usize) -> f64 {
    w / (2.0 * h4.v) * bracket(h3, h4) + h4.g[T] / (4.0 * h4.v) * (h3.g[k] / h3.v + h4.g[k] / h4.v)
        - h4.h[k][T] / (2.0 * h4.v)
}

/// `R_4k` of the canonical d-connection.
pub fn eq4(h3: &Jet, h4: &Jet, n: &Jet) -> f64 {
    -h4.v / (2.0 * h3.v) * n.h[T][T] + (0.5 * h4.v / h3.v * h3.g[T] - 1.5 * h4.g[T]) * n.g[T] / (2.0 * h3.v)
}

/// Auxiliary quantities `phi`, `alpha_i = h4* d_i phi`, `beta = h4* phi*` and
/// `gamma = (ln |h4|^{3/2} / |h3|)*`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AuxValues {
    pub phi: f64,
    pub alpha: [f64; 2],
    pub beta: f64,
    pub gamma: f64,
}

pub fn aux_values(h3: &Jet, h4: &Jet, at: [f64; 3]) -> Result<AuxValues> {
    if h3.v.abs() < DEGENERACY_FLOOR {
        return Err(Error::Degenerate { name: "h3".into(), value: h3.v, point: [at[0], at[1], at[2], 0.0] });
    }
    if h4.v.abs() < DEGENERACY_FLOOR {
        return Err(Error::Degenerate { name: "h4".into(), value: h4.v, point: [at[0], at[1], at[2], 0.0] });
    }
    if h4.g[T].abs() < DEGENERACY_FLOOR {
        return Err(Error::VacuumBranch(at));
    }
    let phi = (h4.g[T] / (h3.v * h4.v).abs().sqrt()).abs().ln();
    let dphi = |a: usize| h4.h[a][T] / h4.g[T] - 0.5 * (h3.g[a] / h3.v + h4.g[a] / h4.v);
    let gamma = 1.5 * h4.g[T] / h4.v - h3.g[T] / h3.v;
    Ok(AuxValues {
        phi,
        alpha: [h4.g[T] * dphi(0), h4.g[T] * dphi(1)],
        beta: h4.g[T] * dphi(T),
        gamma,
    })
}

// ---------------------------------------------------------------------------
// Jet helpers

/// Jet of `df/du_a`; its Hessian is unknown and marked NaN.
fn partial(f: &Jet, a: usize) -> Jet {
    let mut j = Jet::constant(f.g[a]);
    for b in 0..4 {
        j.g[b] = f.h[b][a];
    }
    j.h = [[f64::NAN; 4]; 4];
    j
}

/// Cumulative trapezoid `int_{t0}^t q dt` along one column, returned as jets of the integral.
///
/// For a sure integrand this is the composite trapezoid; for a sampled stochastic
/// path it is the Stratonovich midpoint sum against `dt`.
fn integrate_column(q: &[Jet], dt: f64) -> Vec<Jet> {
    let mut v = 0.0;
    let mut g = [0.0; 2];
    let mut hh = [[0.0; 2]; 2];
    let mut out = Vec::with_capacity(q.len());
    for k in 0..q.len() {
        if k > 0 {
            let (a, b) = (&q[k - 1], &q[k]);
            v += 0.5 * dt * (a.v + b.v);
            for i in 0..2 {
                g[i] += 0.5 * dt * (a.g[i] + b.g[i]);
                for m in 0..2 {
                    hh[i][m] += 0.5 * dt * (a.h[i][m] + b.h[i][m]);
                }
            }
        }
        let mut j = Jet::constant(v);
        j.g[0] = g[0];
        j.g[1] = g[1];
        j.g[T] = q[k].v;
        for i in 0..2 {
            for m in 0..2 {
                j.h[i][m] = hh[i][m];
            }
            j.h[i][T] = q[k].g[i];
            j.h[T][i] = q[k].g[i];
        }
        j.h[T][T] = q[k].g[T];
        out.push(j);
    }
    out
}

fn xt_point(grid: &Grid3, p: usize) -> [f64; 4] {
    grid.point(p, 0.0)
}

fn degenerate(name: &str, value: f64, grid: &Grid3, p: usize) -> Error {
    Error::Degenerate { name: name.to_string(), value, point: xt_point(grid, p) }
}

/// `num / den`, or `0` in the `0/0` branch; a nonzero numerator over a vanishing denominator is an error.
fn ratio_or_zero(num: &Jet, den: &Jet, scale: f64, name: &str, grid: &Grid3, p: usize) -> Result<Jet> {
    let floor = 1e-12 * scale.max(1.0);
    if den.v.abs() > floor {
        Ok(*num / *den)
    } else if num.v.abs() <= floor {
        Ok(Jet::constant(0.0))
    } else {
        Err(degenerate(name, den.v, grid, p))
    }
}

fn check_finite(name: &str, j: &Jet, grid: &Grid3, p: usize) -> Result<()> {
    if !j.v.is_finite() || !j.g[..3].iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(format!("{name} at {:?}", xt_point(grid, p))));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inputs

/// A generator input: an analytic field sampled on the grid, or grid data.
#[derive(Clone)]
pub enum Input {
    Field(Field),
    Grid(GridField),
}

impl From<Field> for Input {
    fn from(f: Field) -> Self {
        Input::Field(f)
    }
}

impl From<GridField> for Input {
    fn from(g: GridField) -> Self {
        Input::Grid(g)
    }
}

impl From<f64> for Input {
    fn from(c: f64) -> Self {
        Input::Field(constant(c))
    }
}

impl Input {
    pub fn sample(&self, grid: &Grid3, mode: DerivativeMode, name: &str) -> Result<GridField> {
        match self {
            Input::Field(f) => GridField::sample(f.as_ref(), grid, 0.0, mode, name),
            Input::Grid(g) => {
                if g.values.len() != grid.len() {
                    return Err(Error::InvalidInput(format!(
                        "{name}: {} grid values for a grid of {} nodes",
                        g.values.len(),
                        grid.len()
                    )));
                }
                Ok(g.clone())
            }
        }
    }

    fn locals(&self, grid: &Grid3, mode: DerivativeMode, name: &str) -> Result<Vec<Jet>> {
        let g = self.sample(grid, mode, name)?;
        let l = g.locals(grid, mode).into_owned();
        if let Some(p) = l.iter().position(|j| !j.v.is_finite()) {
            return Err(Error::NonFinite(format!("{name} at {:?}", xt_point(grid, p))));
        }
        Ok(l)
    }
}

/// Sign in front of the `t`-integral defining `h4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Plus,
    #[default]
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// Integration functions `1n_k(x)` and `2n_k(x)` of the `n`-coefficients.
#[derive(Clone)]
pub struct NIntegration {
    pub n1: [Input; 2],
    pub n2: [Input; 2],
}

impl Default for NIntegration {
    fn default() -> Self {
        NIntegration { n1: [0.0.into(), 0.0.into()], n2: [0.0.into(), 0.0.into()] }
    }
}

/// Options shared by all generators.
#[derive(Clone)]
pub struct SolveOptions {
    pub mode: DerivativeMode,
    /// Required signs of `(h3, h4)`; `None` only rejects sign changes along `t`.
    pub signature: Option<[i8; 2]>,
    pub psi: PsiOptions,
    pub psi_boundary: Field,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { mode: DerivativeMode::Analytic, signature: Some([-1, 1]), psi: PsiOptions::default(), psi_boundary: constant(0.0) }
    }
}

/// Family-A generating data.
#[derive(Clone)]
pub struct GeneratingData {
    pub phi: Input,
    pub upsilon2: Input,
    pub upsilon4: Field,
    pub h4_0: Input,
    pub n: NIntegration,
    pub sign: Sign,
}

impl GeneratingData {
    pub fn new(phi: impl Into<Input>, upsilon2: impl Into<Input>) -> Self {
        GeneratingData {
            phi: phi.into(),
            upsilon2: upsilon2.into(),
            upsilon4: constant(0.0),
            h4_0: 0.0.into(),
            n: NIntegration::default(),
            sign: Sign::Minus,
        }
    }
}

#[derive(Clone)]
pub struct VacuumData {
    pub h3: Input,
    pub w: [Input; 2],
    pub h4_0: Input,
    pub n: NIntegration,
    pub upsilon2: Input,
    pub upsilon4: Field,
}

#[derive(Clone)]
pub struct H3ConstData {
    pub h3_0: f64,
    pub upsilon2: Field,
    pub upsilon4: Field,
    /// `h4` and `h4*` on the first `t`-slice, as functions of `x`.
    pub h4_init: Field,
    pub dh4_init: Field,
    pub n: NIntegration,
}

#[derive(Clone)]
pub struct ConstPhiData {
    pub f: Input,
    pub upsilon2: Input,
    pub upsilon4: Field,
    pub h_0: f64,
    pub sigma40: Input,
    pub n: NIntegration,
}

// ---------------------------------------------------------------------------
// Solutions

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    A,
    Vacuum,
    H3const,
    Constphi,
}

#[derive(Clone, Debug)]
pub struct AnsatzSolution {
    pub family: Family,
    pub grid: Grid3,
    pub psi: PsiSolution,
    pub h3: GridField,
    pub h4: GridField,
    pub w: [GridField; 2],
    pub n: [GridField; 2],
    /// `varsigma_Upsilon` of the constant-`phi` family.
    pub sigma_upsilon: Option<GridField>,
    /// Source the solution was built for.
    pub upsilon2: GridField,
    /// `h_0` of the constant-`phi` family.
    pub h_0: Option<f64>,
}

impl AnsatzSolution {
    /// `g1 = g2 = e^psi` on the h-grid.
    pub fn g(&self) -> Vec<f64> {
        self.psi.values.iter().map(|p| p.exp()).collect()
    }

    /// Drops stored derivative data.
    pub fn strip(&mut self) {
        self.h3.strip();
        self.h4.strip();
        for f in self.w.iter_mut().chain(self.n.iter_mut()) {
            f.strip();
        }
        if let Some(s) = self.sigma_upsilon.as_mut() {
            s.strip();
        }
        self.upsilon2.strip();
    }

    /// The solution as a chart metric, interpolated trilinearly between nodes.
    pub fn metric_spec(&self) -> MetricSpec {
        let nt = self.grid.t.points;
        let g3: Vec<f64> = self.g().iter().flat_map(|v| std::iter::repeat_n(*v, nt)).collect();
        let gf = GridField::from_values(g3);
        let f = |x: &GridField| -> Field { std::sync::Arc::new(GridInterp::new(self.grid, x)) };
        let sig = [1, 1, self.h3.values[0].signum() as i8, self.h4.values[0].signum() as i8];
        MetricSpec::diagonal([f(&gf), f(&gf)], [f(&self.h3), f(&self.h4)])
            .with_n(2, 0, f(&self.w[0]))
            .with_n(2, 1, f(&self.w[1]))
            .with_n(3, 0, f(&self.n[0]))
            .with_n(3, 1, f(&self.n[1]))
            .with_signature(sig)
    }

    /// Columnar CSV: `x1,x2,t,g1,g2,h3,h4,w1,w2,n1,n2`.
    pub fn to_csv(&self) -> String {
        let mut c = Csv::new(&["x1", "x2", "t", "g1", "g2", "h3", "h4", "w1", "w2", "n1", "n2"]);
        let g = self.g();
        let nt = self.grid.t.points;
        for p in 0..self.grid.len() {
            let u = self.grid.point(p, 0.0);
            let gv = g[p / nt];
            c.row(&[
                u[0],
                u[1],
                u[2],
                gv,
                gv,
                self.h3.values[p],
                self.h4.values[p],
                self.w[0].values[p],
                self.w[1].values[p],
                self.n[0].values[p],
                self.n[1].values[p],
            ]);
        }
        c.finish()
    }

    pub fn metadata(&self, tolerances: serde_json::Value, seed: Option<u64>) -> serde_json::Value {
        serde_json::json!({
            "family": self.family,
            "grid": self.grid,
            "psi": {
                "stencil": self.psi.options.stencil,
                "equation": self.psi.options.equation,
                "sweeps": self.psi.sweeps,
                "stencil_residual": fmt17(self.psi.residual),
            },
            "tolerances": tolerances,
            "seed": seed,
        })
    }
}

fn check_metric(h3: &Jet, h4: &Jet, first: (f64, f64), signature: Option<[i8; 2]>, grid: &Grid3, p: usize) -> Result<()> {
    check_finite("h3", h3, grid, p)?;
    check_finite("h4", h4, grid, p)?;
    for (name, v, s0) in [("h3", h3.v, first.0), ("h4", h4.v, first.1)] {
        if v.abs() < DEGENERACY_FLOOR {
            return Err(degenerate(name, v, grid, p));
        }
        let want = match signature {
            Some(s) => (if name == "h3" { s[0] } else { s[1] }) as f64,
            None => s0.signum(),
        };
        if want != 0.0 && v.signum() != want {
            return Err(Error::SignatureMismatch { name: name.to_string(), value: v, point: xt_point(grid, p) });
        }
    }
    Ok(())
}

struct Column {
    h3: Vec<Jet>,
    h4: Vec<Jet>,
    w: [Vec<Jet>; 2],
    extra: Vec<Jet>,
}

/// `n_k = 1n_k + 2n_k int sgn(h3) sqrt|h3| / |h4|^{3/2} dt` along one column.
fn n_column(h3: &[Jet], h4: &[Jet], n1: [&[Jet]; 2], n2: [&[Jet]; 2], dt: f64) -> [Vec<Jet>; 2] {
    let q: Vec<Jet> = h3.iter().zip(h4).map(|(a, b)| (a.abs().sqrt() * b.abs().powf(-1.5)).scale(a.v.signum())).collect();
    let integral = integrate_column(&q, dt);
    std::array::from_fn(|k| (0..q.len()).map(|m| n1[k][m] + n2[k][m] * integral[m]).collect())
}

fn assemble(
    family: Family,
    grid: &Grid3,
    psi: PsiSolution,
    cols: Vec<Column>,
    nint: (&[Jet], &[Jet], &[Jet], &[Jet]),
    upsilon2: GridField,
    h_0: Option<f64>,
) -> AnsatzSolution {
    let nt = grid.t.points;
    let dt = grid.t.step();
    let (n1a, n1b, n2a, n2b) = nint;
    let ns: Vec<[Vec<Jet>; 2]> = cols
        .par_iter()
        .enumerate()
        .map(|(c, col)| {
            let r = c * nt..(c + 1) * nt;
            n_column(&col.h3, &col.h4, [&n1a[r.clone()], &n1b[r.clone()]], [&n2a[r.clone()], &n2b[r]], dt)
        })
        .collect();
    let flat = |f: &dyn Fn(&Column) -> &Vec<Jet>| GridField::from_jets(cols.iter().flat_map(|c| f(c).iter().copied()).collect());
    let extra = if cols[0].extra.is_empty() { None } else { Some(flat(&|c| &c.extra)) };
    AnsatzSolution {
        family,
        grid: *grid,
        psi,
        h3: flat(&|c| &c.h3),
        h4: flat(&|c| &c.h4),
        w: [flat(&|c| &c.w[0]), flat(&|c| &c.w[1])],
        n: [
            GridField::from_jets(ns.iter().flat_map(|n| n[0].iter().copied()).collect()),
            GridField::from_jets(ns.iter().flat_map(|n| n[1].iter().copied()).collect()),
        ],
        sigma_upsilon: extra,
        upsilon2,
        h_0,
    }
}

fn n_inputs(n: &NIntegration, grid: &Grid3, mode: DerivativeMode) -> Result<[Vec<Jet>; 4]> {
    Ok([
        n.n1[0].locals(grid, mode, "1n_1")?,
        n.n1[1].locals(grid, mode, "1n_2")?,
        n.n2[0].locals(grid, mode, "2n_1")?,
        n.n2[1].locals(grid, mode, "2n_2")?,
    ])
}

fn solve_h(upsilon4: &Field, grid: &Grid3, opts: &SolveOptions) -> Result<PsiSolution> {
    solve_psi(upsilon4.as_ref(), &grid.h_grid(), opts.psi_boundary.as_ref(), opts.psi)
}

/// Family A from a generating function `phi(x, t)` with `phi* != 0` and source `Upsilon_2 != 0`.
///
/// `h4 = 0h4 +- 2 int (e^{2 phi})* / Upsilon_2 dt`, `h3 = phi* h4* / (2 Upsilon_2 h4)`,
/// `w_i = d_i phi / phi*`, `n_k = 1n_k + 2n_k int sgn(h3) sqrt|h3| / |h4|^{3/2} dt`.
pub fn generate_family_a(gen: &GeneratingData, grid: &Grid3, opts: &SolveOptions) -> Result<AnsatzSolution> {
    let mode = opts.mode;
    let psi = solve_h(&gen.upsilon4, grid, opts)?;
    let phi = gen.phi.locals(grid, mode, "phi")?;
    let ups_field = gen.upsilon2.sample(grid, mode, "upsilon2")?;
    let ups = ups_field.locals(grid, mode).into_owned();
    let h40 = gen.h4_0.locals(grid, mode, "h4_0")?;
    let nint = n_inputs(&gen.n, grid, mode)?;
    let s = gen.sign.value();
    let nt = grid.t.points;
    let dt = grid.t.step();
    let cols = (0..grid.columns())
        .into_par_iter()
        .map(|c| -> Result<Column> {
            let base = c * nt;
            let mut q = Vec::with_capacity(nt);
            for k in 0..nt {
                let p = base + k;
                let ph = &phi[p];
                if ph.g[T].abs() < DEGENERACY_FLOOR {
                    return Err(degenerate("phi*", ph.g[T], grid, p));
                }
                if ups[p].v.abs() < DEGENERACY_FLOOR {
                    return Err(degenerate("upsilon2", ups[p].v, grid, p));
                }
                q.push(partial(ph, T) * ph.scale(2.0).exp().scale(2.0) / ups[p]);
            }
            let integral = integrate_column(&q, dt);
            let mut col = Column { h3: Vec::with_capacity(nt), h4: Vec::with_capacity(nt), w: [Vec::new(), Vec::new()], extra: Vec::new() };
            let mut first = (0.0, 0.0);
            for k in 0..nt {
                let p = base + k;
                let h4 = h40[p] + integral[k].scale(2.0 * s);
                let h3 = partial(&phi[p], T) * partial(&h4, T) / (ups[p] * h4).scale(2.0);
                if k == 0 {
                    first = (h3.v, h4.v);
                }
                check_metric(&h3, &h4, first, opts.signature, grid, p)?;
                let pt = partial(&phi[p], T);
                for i in 0..2 {
                    col.w[i].push(partial(&phi[p], i) / pt);
                }
                col.h3.push(h3);
                col.h4.push(h4);
            }
            Ok(col)
        })
        .collect::<Result<Vec<Column>>>()?;
    Ok(assemble(Family::A, grid, psi, cols, (&nint[0], &nint[1], &nint[2], &nint[3]), ups_field, None))
}

/// Vacuum family `h4 = 0h4(x)`, `Upsilon_2 = 0`, any `h3` and `w_i`;
/// `n_k = 1n_k + 2n_k int sgn(h3) sqrt|h3| dt / |0h4|^{3/2}` (Stratonovich midpoint sums for sampled paths).
pub fn generate_family_vacuum(data: &VacuumData, grid: &Grid3, opts: &SolveOptions) -> Result<AnsatzSolution> {
    let mode = opts.mode;
    let ups_field = data.upsilon2.sample(grid, mode, "upsilon2")?;
    if let Some(p) = ups_field.values.iter().position(|v| *v != 0.0) {
        return Err(Error::InvalidInput(format!(
            "vacuum family needs Upsilon_2 = 0, got {} at {:?}",
            ups_field.values[p],
            xt_point(grid, p)
        )));
    }
    let psi = solve_h(&data.upsilon4, grid, opts)?;
    let h3 = data.h3.locals(grid, mode, "h3")?;
    let mut h40 = data.h4_0.locals(grid, mode, "h4_0")?;
    for (p, j) in h40.iter_mut().enumerate() {
        if j.g[T].abs() > 1e-12 * j.v.abs().max(1.0) {
            return Err(Error::InvalidInput(format!("vacuum h4 must not depend on t (at {:?})", xt_point(grid, p))));
        }
        j.g[T] = 0.0;
        for a in 0..4 {
            j.h[a][T] = 0.0;
            j.h[T][a] = 0.0;
        }
    }
    let w = [data.w[0].locals(grid, mode, "w_1")?, data.w[1].locals(grid, mode, "w_2")?];
    let nint = n_inputs(&data.n, grid, mode)?;
    let nt = grid.t.points;
    let cols = (0..grid.columns())
        .into_par_iter()
        .map(|c| -> Result<Column> {
            let r = c * nt..(c + 1) * nt;
            let first = (h3[r.start].v, h40[r.start].v);
            for p in r.clone() {
                check_metric(&h3[p], &h40[p], first, opts.signature, grid, p)?;
            }
            Ok(Column {
                h3: h3[r.clone()].to_vec(),
                h4: h40[r.clone()].to_vec(),
                w: [w[0][r.clone()].to_vec(), w[1][r].to_vec()],
                extra: Vec::new(),
            })
        })
        .collect::<Result<Vec<Column>>>()?;
    Ok(assemble(Family::Vacuum, grid, psi, cols, (&nint[0], &nint[1], &nint[2], &nint[3]), ups_field, None))
}

/// `h4'' = (h4')^2 / (2 h4) + 2 h3_0 h4 Upsilon_2(t)` integrated by classical RK4 on the `t`-nodes.
///
/// Returns `(h4, h4*)` per node.
pub fn integrate_h4_column(
    h3_0: f64,
    upsilon2: &dyn Fn(f64) -> f64,
    t: &[f64],
    h4_start: f64,
    dh4_start: f64,
) -> std::result::Result<Vec<(f64, f64)>, (usize, f64)> {
    let rhs = |tt: f64, h: f64, hp: f64| (hp, hp * hp / (2.0 * h) + 2.0 * h3_0 * h * upsilon2(tt));
    let mut out = Vec::with_capacity(t.len());
    let (mut h, mut hp) = (h4_start, dh4_start);
    out.push((h, hp));
    for k in 1..t.len() {
        let (t0, dt) = (t[k - 1], t[k] - t[k - 1]);
        let k1 = rhs(t0, h, hp);
        let k2 = rhs(t0 + 0.5 * dt, h + 0.5 * dt * k1.0, hp + 0.5 * dt * k1.1);
        let k3 = rhs(t0 + 0.5 * dt, h + 0.5 * dt * k2.0, hp + 0.5 * dt * k2.1);
        let k4 = rhs(t0 + dt, h + dt * k3.0, hp + dt * k3.1);
        h += dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        hp += dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        if !(h.is_finite() && hp.is_finite()) || h.abs() < DEGENERACY_FLOOR {
            return Err((k, h));
        }
        out.push((h, hp));
    }
    Ok(out)
}

/// Family with constant `h3 = h3_0`; `h4` from the reduced `t`-ODE per `x`-column,
/// `w_i = alpha_i / beta` of `phi~ = ln|h4* / sqrt|h3_0 h4||`, `n` as in family A.
pub fn generate_family_h3const(data: &H3ConstData, grid: &Grid3, opts: &SolveOptions) -> Result<AnsatzSolution> {
    let mode = opts.mode;
    if data.h3_0.abs() < DEGENERACY_FLOOR {
        return Err(Error::Degenerate { name: "h3_0".into(), value: data.h3_0, point: [f64::NAN; 4] });
    }
    let psi = solve_h(&data.upsilon4, grid, opts)?;
    let ts = grid.t.coords();
    let nt = grid.t.points;
    let odes = (0..grid.columns())
        .into_par_iter()
        .map(|c| -> Result<Vec<(f64, f64)>> {
            let p0 = c * nt;
            let u0 = grid.point(p0, 0.0);
            let h = data.h4_init.value(&u0);
            let hp = data.dh4_init.value(&u0);
            if !(h.is_finite() && hp.is_finite()) {
                return Err(Error::NonFinite(format!("initial h4 data at {u0:?}")));
            }
            if h.abs() < DEGENERACY_FLOOR {
                return Err(degenerate("h4", h, grid, p0));
            }
            let ups = |t: f64| data.upsilon2.value(&[u0[0], u0[1], t, 0.0]);
            integrate_h4_column(data.h3_0, &ups, &ts, h, hp).map_err(|(k, v)| degenerate("h4 (blow-up)", v, grid, p0 + k))
        })
        .collect::<Result<Vec<_>>>()?;
    let ups_field = GridField::sample(data.upsilon2.as_ref(), grid, 0.0, mode, "upsilon2")?;
    let ups = ups_field.locals(grid, mode).into_owned();
    let h4v: Vec<f64> = odes.iter().flat_map(|c| c.iter().map(|x| x.0)).collect();
    let h4p: Vec<f64> = odes.iter().flat_map(|c| c.iter().map(|x| x.1)).collect();
    let h3_0 = data.h3_0;
    let h4pp: Vec<f64> = (0..grid.len())
        .map(|p| h4p[p] * h4p[p] / (2.0 * h4v[p]) + 2.0 * h3_0 * h4v[p] * ups[p].v)
        .collect();
    let mut h4 = fd_locals(grid, &h4v);
    let dx_h4p = [grid_diff(grid, &h4p, 0), grid_diff(grid, &h4p, 1)];
    for (p, j) in h4.iter_mut().enumerate() {
        j.g[T] = h4p[p];
        j.h[T][T] = h4pp[p];
        for i in 0..2 {
            j.h[i][T] = dx_h4p[i][p];
            j.h[T][i] = dx_h4p[i][p];
        }
    }
    let mut wv = [vec![0.0; grid.len()], vec![0.0; grid.len()]];
    for p in 0..grid.len() {
        let j = &h4[p];
        let beta = j.h[T][T] - 0.5 * j.g[T] * j.g[T] / j.v;
        let scale = j.h[T][T].abs() + (j.g[T] * j.g[T] / j.v).abs();
        for i in 0..2 {
            let alpha = j.h[i][T] - 0.5 * j.g[T] * j.g[i] / j.v;
            wv[i][p] = ratio_or_zero(&Jet::constant(alpha), &Jet::constant(beta), scale, "beta", grid, p)?.v;
        }
    }
    let w = [fd_locals(grid, &wv[0]), fd_locals(grid, &wv[1])];
    let h3 = Jet::constant(h3_0);
    let nint = n_inputs(&data.n, grid, mode)?;
    let cols = (0..grid.columns())
        .map(|c| -> Result<Column> {
            let r = c * nt..(c + 1) * nt;
            let first = (h3_0, h4[r.start].v);
            for p in r.clone() {
                check_metric(&h3, &h4[p], first, opts.signature, grid, p)?;
            }
            Ok(Column {
                h3: vec![h3; nt],
                h4: h4[r.clone()].to_vec(),
                w: [w[0][r.clone()].to_vec(), w[1][r].to_vec()],
                extra: Vec::new(),
            })
        })
        .collect::<Result<Vec<Column>>>()?;
    Ok(assemble(Family::H3const, grid, psi, cols, (&nint[0], &nint[1], &nint[2], &nint[3]), ups_field, None))
}

/// Constant-`phi` family: `varsigma = varsigma_40 - (h_0^2 / 16) int Upsilon_2 f^4 dt`,
/// `h3 = -h_0^2 (f*)^2 |varsigma|`, `h4 = f^2`, `w_i = d_i varsigma / varsigma*`.
pub fn generate_family_constphi(data: &ConstPhiData, grid: &Grid3, opts: &SolveOptions) -> Result<AnsatzSolution> {
    let mode = opts.mode;
    if data.h_0.abs() < DEGENERACY_FLOOR {
        return Err(Error::Degenerate { name: "h_0".into(), value: data.h_0, point: [f64::NAN; 4] });
    }
    let psi = solve_h(&data.upsilon4, grid, opts)?;
    let f = data.f.locals(grid, mode, "f")?;
    let ups_field = data.upsilon2.sample(grid, mode, "upsilon2")?;
    let ups = ups_field.locals(grid, mode).into_owned();
    let s40 = data.sigma40.locals(grid, mode, "sigma40")?;
    let nint = n_inputs(&data.n, grid, mode)?;
    let c0 = -data.h_0 * data.h_0 / 16.0;
    let nt = grid.t.points;
    let dt = grid.t.step();
    let cols = (0..grid.columns())
        .into_par_iter()
        .map(|c| -> Result<Column> {
            let base = c * nt;
            let q: Vec<Jet> = (base..base + nt).map(|p| ups[p] * f[p].powi(4)).collect();
            let integral = integrate_column(&q, dt);
            let mut col = Column { h3: Vec::new(), h4: Vec::new(), w: [Vec::new(), Vec::new()], extra: Vec::new() };
            let mut first = (0.0, 0.0);
            for k in 0..nt {
                let p = base + k;
                if f[p].g[T].abs() < DEGENERACY_FLOOR {
                    return Err(degenerate("f*", f[p].g[T], grid, p));
                }
                let sigma = s40[p] + integral[k].scale(c0);
                let ft = partial(&f[p], T);
                let h3 = (ft * ft * sigma.abs()).scale(-data.h_0 * data.h_0);
                let h4 = f[p] * f[p];
                if k == 0 {
                    first = (h3.v, h4.v);
                }
                check_metric(&h3, &h4, first, opts.signature, grid, p)?;
                let st = partial(&sigma, T);
                let scale = sigma.v.abs() + st.v.abs();
                for i in 0..2 {
                    col.w[i].push(ratio_or_zero(&partial(&sigma, i), &st, scale, "varsigma*", grid, p)?);
                }
                col.h3.push(h3);
                col.h4.push(h4);
                col.extra.push(sigma);
            }
            Ok(col)
        })
        .collect::<Result<Vec<Column>>>()?;
    Ok(assemble(Family::Constphi, grid, psi, cols, (&nint[0], &nint[1], &nint[2], &nint[3]), ups_field, Some(data.h_0)))
}

/// `sqrt|h3| - h_0 (sqrt|h4|)*` per node for a constant-`phi` solution.
pub fn constphi_identity_residual(sol: &AnsatzSolution, mode: DerivativeMode) -> Result<Vec<f64>> {
    let h0 = sol.h_0.ok_or_else(|| Error::InvalidInput("identity applies to the constant-phi family".into()))?;
    let h3 = sol.h3.locals(&sol.grid, mode);
    let h4 = sol.h4.locals(&sol.grid, mode);
    Ok(h3.iter().zip(h4.iter()).map(|(a, b)| a.v.abs().sqrt() - h0 * b.abs().sqrt().g[T]).collect())
}

// ---------------------------------------------------------------------------
// Residuals

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub max: f64,
    /// Root mean square over nodes.
    pub l2: f64,
}

impl Norms {
    pub fn of<'a>(vals: impl IntoIterator<Item = &'a f64>) -> Self {
        let mut max: f64 = 0.0;
        let mut sum = 0.0;
        let mut n = 0usize;
        for v in vals {
            max = max.max(v.abs());
            sum += v * v;
            n += 1;
        }
        Norms { max, l2: if n == 0 { 0.0 } else { (sum / n as f64).sqrt() } }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    /// h-equation on the h-grid.
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
    pub r3: [Vec<f64>; 2],
    pub r4: [Vec<f64>; 2],
    pub norms: [Norms; 4],
}

impl ResidualReport {
    pub fn max_234(&self) -> f64 {
        self.norms[1].max.max(self.norms[2].max).max(self.norms[3].max)
    }
}

/// Residuals of the four decoupled equations against the solution's own sources.
pub fn residuals(sol: &AnsatzSolution, mode: DerivativeMode) -> Result<ResidualReport> {
    residuals_with(sol, &sol.upsilon2, &sol.psi.upsilon4, mode)
}

/// Residuals against explicit sources `Upsilon_2` (grid) and `Upsilon_4` (h-grid).
///
/// In analytic mode the h-equation uses the `psi` solver's stencil at interior
/// nodes (boundary nodes carry Dirichlet data and report zero); in
/// finite-difference mode every equation uses second-order differences of the
/// node values.
pub fn residuals_with(sol: &AnsatzSolution, upsilon2: &GridField, upsilon4: &[f64], mode: DerivativeMode) -> Result<ResidualReport> {
    let grid = &sol.grid;
    let h3 = sol.h3.locals(grid, mode);
    let h4 = sol.h4.locals(grid, mode);
    let n = [sol.n[0].locals(grid, mode), sol.n[1].locals(grid, mode)];
    if let Some(p) = (0..grid.len()).find(|&p| h3[p].v.abs() < DEGENERACY_FLOOR) {
        return Err(degenerate("h3", h3[p].v, grid, p));
    }
    if let Some(p) = (0..grid.len()).find(|&p| h4[p].v.abs() < DEGENERACY_FLOOR) {
        return Err(degenerate("h4", h4[p].v, grid, p));
    }
    let r2: Vec<f64> = (0..grid.len()).into_par_iter().map(|p| eq2(&h3[p], &h4[p], upsilon2.values[p])).collect();
    let r3: [Vec<f64>; 2] = std::array::from_fn(|k| {
        (0..grid.len()).into_par_iter().map(|p| eq3(&h3[p], &h4[p], sol.w[k].values[p], k)).collect()
    });
    let r4: [Vec<f64>; 2] =
        std::array::from_fn(|k| (0..grid.len()).into_par_iter().map(|p| eq4(&h3[p], &h4[p], &n[k][p])).collect());
    let r1 = h_residual(&sol.psi, upsilon4, mode);
    let norms = [
        Norms::of(&r1),
        Norms::of(&r2),
        Norms::of(r3[0].iter().chain(&r3[1])),
        Norms::of(r4[0].iter().chain(&r4[1])),
    ];
    Ok(ResidualReport { r1, r2, r3, r4, norms })
}

fn h_residual(psi: &PsiSolution, upsilon4: &[f64], mode: DerivativeMode) -> Vec<f64> {
    let g2 = &psi.grid;
    if mode == DerivativeMode::FiniteDifference {
        let dims = [g2.x1.points, g2.x2.points, 1];
        let g: Vec<f64> = psi.values.iter().map(|p| p.exp()).collect();
        let (h1, h2) = (g2.x1.step(), g2.x2.step());
        let d1 = along_axis(&g, dims, 0, |l| diff1(l, h1));
        let d2 = along_axis(&g, dims, 1, |l| diff1(l, h2));
        let d11 = along_axis(&g, dims, 0, |l| diff2(l, h1));
        let d22 = along_axis(&g, dims, 1, |l| diff2(l, h2));
        return (0..g.len())
            .map(|c| {
                let mut j = Jet::constant(g[c]);
                j.g[0] = d1[c];
                j.g[1] = d2[c];
                j.h[0][0] = d11[c];
                j.h[1][1] = d22[c];
                eq1(&j, &j, upsilon4[c])
            })
            .collect();
    }
    let lap = psi.discrete_laplacian();
    (0..g2.len())
        .map(|c| {
            let [i, j] = [c / g2.x2.points, c % g2.x2.points];
            if g2.is_boundary(i, j) {
                0.0
            } else {
                upsilon4[c] - lap[c] / (2.0 * psi.values[c].exp())
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Constraint checks

#[derive(Clone, Debug, PartialEq)]
pub struct LcReport {
    /// `w_i* - e_i ln|h4|`.
    pub w_star: [Vec<f64>; 2],
    /// `e_1 w_2 - e_2 w_1`.
    pub w_curl: Vec<f64>,
    /// `n_i*`.
    pub n_star: [Vec<f64>; 2],
    /// `d_1 n_2 - d_2 n_1`.
    pub n_curl: Vec<f64>,
    /// Max-norms in the order above.
    pub max: [f64; 4],
    pub tol: f64,
    pub pass: bool,
    pub dominant: &'static str,
}

pub const LC_NAMES: [&str; 4] = ["w_star", "w_curl", "n_star", "n_curl"];

/// Levi-Civita constraint residuals with `e_i = d_i - w_i d_t` on `y`-independent data.
pub fn lc_constraint_check(sol: &AnsatzSolution, tol: f64, mode: DerivativeMode) -> LcReport {
    let grid = &sol.grid;
    let h4 = sol.h4.locals(grid, mode);
    let w = [sol.w[0].locals(grid, mode), sol.w[1].locals(grid, mode)];
    let n = [sol.n[0].locals(grid, mode), sol.n[1].locals(grid, mode)];
    let len = grid.len();
    let e = |f: &Jet, i: usize, p: usize| f.g[i] - w[i][p].v * f.g[T];
    let w_star: [Vec<f64>; 2] = std::array::from_fn(|i| {
        (0..len)
            .map(|p| {
                let l = h4[p].abs().ln();
                w[i][p].g[T] - e(&l, i, p)
            })
            .collect()
    });
    let w_curl: Vec<f64> = (0..len).map(|p| e(&w[1][p], 0, p) - e(&w[0][p], 1, p)).collect();
    let n_star: [Vec<f64>; 2] = std::array::from_fn(|i| (0..len).map(|p| n[i][p].g[T]).collect());
    let n_curl: Vec<f64> = (0..len).map(|p| n[1][p].g[0] - n[0][p].g[1]).collect();
    let max = [
        Norms::of(w_star[0].iter().chain(&w_star[1])).max,
        Norms::of(&w_curl).max,
        Norms::of(n_star[0].iter().chain(&n_star[1])).max,
        Norms::of(&n_curl).max,
    ];
    let di = max.iter().enumerate().fold(0, |best, (i, &m)| if m > max[best] { i } else { best });
    let pass = max.iter().all(|m| *m < tol);
    LcReport { w_star, w_curl, n_star, n_curl, max, tol, pass, dominant: LC_NAMES[di] }
}

/// `e_k omega = d_k omega - w_k omega* - n_k d_y omega` per node at height `y`.
pub fn check_conformal_condition(omega: &dyn ScalarField, sol: &AnsatzSolution, y: f64, mode: DerivativeMode) -> Result<Vec<[f64; 2]>> {
    let grid = &sol.grid;
    (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let u = grid.point(p, y);
            let o = field_jet(omega, &u, mode).map_err(|e| match e {
                JetError::MissingAnalytic => Error::MissingAnalytic("omega".into()),
                JetError::Mismatch { analytic, finite_difference, .. } => {
                    Error::DerivativeMismatch { name: "omega".into(), analytic, finite_difference }
                }
            })?;
            Ok(std::array::from_fn(|k| o.g[k] - sol.w[k].values[p] * o.g[T] - sol.n[k].values[p] * o.g[3]))
        })
        .collect()
}

/// Per-node auxiliary values of a solution.
pub fn aux_grid(sol: &AnsatzSolution, mode: DerivativeMode) -> Result<Vec<AuxValues>> {
    let grid = &sol.grid;
    let h3 = sol.h3.locals(grid, mode);
    let h4 = sol.h4.locals(grid, mode);
    (0..grid.len())
        .map(|p| {
            let u = grid.point(p, 0.0);
            aux_values(&h3[p], &h4[p], [u[0], u[1], u[2]])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{jet_fn, value_fn};
    use crate::geometry::{distortion, max_abs3, ChartPoint};
    use std::f64::consts::PI;

    fn grid(n: usize) -> Grid3 {
        Grid3::cube(0.0, 1.0, n).unwrap()
    }

    fn demo_a() -> GeneratingData {
        let mut g = GeneratingData::new(jet_fn(|u| u[2] + (u[0].sin() * u[1].sin()).scale(0.1)), 1.0);
        g.h4_0 = 20.0.into();
        g
    }

    #[test]
    fn psi_zero_source_zero_boundary() {
        let g2 = Grid2::new(crate::grid::Axis::new(0.0, 1.0, 12).unwrap(), crate::grid::Axis::new(0.0, 2.0, 10).unwrap()).unwrap();
        let s = solve_psi(&0.0, &g2, &0.0, PsiOptions::default()).unwrap();
        assert!(s.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn psi_quadratic_source_meets_stencil_tolerance() {
        let lam = 0.7;
        let a = crate::grid::Axis::new(0.0, 1.0, 24).unwrap();
        let g2 = Grid2::new(a, a).unwrap();
        let b = value_fn(move |u| lam * u[0] * u[0] / 2.0);
        let s = solve_psi(&(lam / 2.0), &g2, b.as_ref(), PsiOptions::default()).unwrap();
        assert!(s.residual < 1e-10);
        let r = s.stencil_residuals();
        assert!(r.iter().all(|x| x.abs() < 1e-10));
        for i in 0..24 {
            let c = g2.index(i, 5);
            let x = a.at(i);
            assert!((s.values[c] - lam * x * x / 2.0).abs() < 1e-9);
        }
    }

    fn manufactured_error(n: usize, stencil: Stencil) -> f64 {
        let a = crate::grid::Axis::new(0.0, PI, n).unwrap();
        let g2 = Grid2::new(a, a).unwrap();
        let exact = |x: f64, y: f64| x.sin() * y.sin();
        let ups = value_fn(move |u| -exact(u[0], u[1]));
        let bnd = value_fn(move |u| exact(u[0], u[1]));
        let opts = PsiOptions { stencil, tol: 1e-12, ..Default::default() };
        let s = solve_psi(ups.as_ref(), &g2, bnd.as_ref(), opts).unwrap();
        let mut e: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                e = e.max((s.values[g2.index(i, j)] - exact(a.at(i), a.at(j))).abs());
            }
        }
        e
    }

    #[test]
    fn psi_five_point_converges_at_second_order() {
        let e1 = manufactured_error(17, Stencil::FivePoint);
        let e2 = manufactured_error(33, Stencil::FivePoint);
        let ratio = e1 / e2;
        assert!(ratio > 3.5 && ratio < 4.5, "{e1} {e2}");
    }

    #[test]
    fn psi_compact_reaches_fourth_order() {
        let e1 = manufactured_error(17, Stencil::Compact);
        let e2 = manufactured_error(33, Stencil::Compact);
        assert!(e1 / e2 > 12.0, "{e1} {e2}");
    }

    #[test]
    fn conformal_h_equation_zeroes_r1() {
        let g = grid(12);
        let mut gen = demo_a();
        gen.upsilon4 = jet_fn(|u| (u[0] * u[1]).scale(0.3) + 0.1);
        let opts = SolveOptions { psi: PsiOptions { equation: HEquation::Conformal, ..Default::default() }, ..Default::default() };
        let sol = generate_family_a(&gen, &g, &opts).unwrap();
        let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
        assert!(rep.norms[0].max < 1e-9, "{:?}", rep.norms[0]);
        let lin = generate_family_a(&gen, &g, &SolveOptions::default()).unwrap();
        let rl = residuals(&lin, DerivativeMode::Analytic).unwrap();
        assert!(rl.norms[0].max > 1e-4);
    }

    #[test]
    fn aux_values_examples() {
        let v = Jet::vars(&[0.0, 0.0, 0.4, 0.0]);
        let h3 = Jet::constant(-1.0);
        let h4 = v[2].scale(2.0).exp();
        let a = aux_values(&h3, &h4, [0.0, 0.0, 0.4]).unwrap();
        assert!((a.phi - (2f64.ln() + 0.4)).abs() < 1e-14);
        assert!((a.beta - 2.0 * (0.8f64).exp()).abs() < 1e-12);
        assert_eq!(a.alpha, [0.0, 0.0]);
        assert!(matches!(aux_values(&h3, &Jet::constant(3.0), [0.0; 3]), Err(Error::VacuumBranch(_))));
    }

    #[test]
    fn family_a_hand_example() {
        let g = grid(32);
        let mut gen = GeneratingData::new(jet_fn(|u| u[2]), 1.0);
        gen.h4_0 = 2.0.into();
        gen.sign = Sign::Plus;
        let opts = SolveOptions { signature: Some([1, 1]), ..Default::default() };
        let sol = generate_family_a(&gen, &g, &opts).unwrap();
        for p in 0..g.len() {
            let t = g.point(p, 0.0)[2];
            assert!((sol.h3.values[p] - 1.0).abs() < 1e-3);
            assert!((sol.h4.values[p] - 2.0 * (2.0 * t).exp()).abs() < 1e-2);
            assert_eq!(sol.w[0].values[p], 0.0);
        }
        let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
        assert!(rep.norms[1].max < 1e-6);
    }

    #[test]
    fn family_a_self_consistent() {
        let g = grid(32);
        let mut gen = demo_a();
        gen.n.n1 = [jet_fn(|u| u[1]).into(), jet_fn(|u| u[0]).into()];
        gen.n.n2 = [jet_fn(|u| (u[0] + 1.0).scale(0.5)).into(), 0.3.into()];
        let sol = generate_family_a(&gen, &g, &SolveOptions::default()).unwrap();
        let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
        assert!(rep.max_234() < 1e-6, "{:?}", rep.norms);
        let fd = residuals(&sol, DerivativeMode::FiniteDifference).unwrap();
        assert!(fd.max_234() < 0.3, "{:?}", fd.norms);
        assert!(sol.w[0].max_abs() > 1e-3);
    }

    #[test]
    fn family_a_finite_difference_residuals_converge() {
        let mut maxes = Vec::new();
        for n in [12, 23] {
            let g = grid(n);
            let opts = SolveOptions { mode: DerivativeMode::FiniteDifference, ..Default::default() };
            let sol = generate_family_a(&demo_a(), &g, &opts).unwrap();
            maxes.push(residuals(&sol, DerivativeMode::FiniteDifference).unwrap().max_234());
        }
        assert!(maxes[0] / maxes[1] > 2.0, "{maxes:?}");
    }

    #[test]
    fn constant_integration_functions_give_constant_n() {
        let g = grid(10);
        let mut gen = demo_a();
        gen.n.n1 = [0.4.into(), (-1.0).into()];
        let sol = generate_family_a(&gen, &g, &SolveOptions::default()).unwrap();
        assert!(sol.n[0].values.iter().all(|v| *v == 0.4));
        let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
        assert_eq!(rep.norms[3].max, 0.0);
    }

    #[test]
    fn perturbed_h4_grows_r2_linearly() {
        let g = grid(16);
        let sol = generate_family_a(&demo_a(), &g, &SolveOptions::default()).unwrap();
        let mut norms = Vec::new();
        for eps in [1e-4, 2e-4, 4e-4] {
            let mut s = sol.clone();
            let jets: Vec<Jet> = s
                .h4
                .jets
                .as_ref()
                .unwrap()
                .iter()
                .enumerate()
                .map(|(p, j)| {
                    let t = g.point(p, 0.0)[2];
                    let mut k = *j;
                    k.v += eps * t;
                    k.g[T] += eps;
                    k
                })
                .collect();
            s.h4 = GridField::from_jets(jets);
            norms.push(residuals(&s, DerivativeMode::Analytic).unwrap().norms[1].max);
        }
        let (r1, r2) = (norms[1] / norms[0], norms[2] / norms[1]);
        assert!((r1 - 2.0).abs() < 0.05 && (r2 - 2.0).abs() < 0.05, "{norms:?}");
    }

    #[test]
    fn flat_solution_has_zero_residuals() {
        let g = grid(8);
        let data = VacuumData {
            h3: (-1.0).into(),
            w: [0.0.into(), 0.0.into()],
            h4_0: 1.0.into(),
            n: NIntegration::default(),
            upsilon2: 0.0.into(),
            upsilon4: constant(0.0),
        };
        let sol = generate_family_vacuum(&data, &g, &SolveOptions::default()).unwrap();
        let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
        assert!(rep.norms.iter().all(|n| n.max == 0.0));
        assert!(lc_constraint_check(&sol, LC_TOL, DerivativeMode::Analytic).pass);
    }

    #[test]
    fn vacuum_hand_integral_and_identities() {
        let g = grid(9);
        let data = VacuumData {
            h3: (-1.0).into(),
            w: [jet_fn(|u| (u[0] * u[2]).sin()).into(), jet_fn(|u| u[1] * u[2] * u[2]).into()],
            h4_0: 1.0.into(),
            n: NIntegration { n1: [0.5.into(), 0.0.into()], n2: [1.0.into(), 1.0.into()] },
            upsilon2: 0.0.into(),
            upsilon4: constant(0.0),
        };
        let sol = generate_family_vacuum(&data, &g, &SolveOptions::default()).unwrap();
        for p in 0..g.len() {
            let t = g.point(p, 0.0)[2];
            assert!((sol.n[0].values[p] - (0.5 - t)).abs() < 1e-14);
        }
        let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
        assert_eq!(rep.norms[1].max, 0.0);
        assert_eq!(rep.norms[2].max, 0.0);
        assert!(rep.norms[3].max < 1e-14);
        let mut bad = data.clone();
        bad.upsilon2 = 0.1.into();
        assert!(matches!(generate_family_vacuum(&bad, &g, &SolveOptions::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn h4_ode_reproduces_closed_form() {
        let ts: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
        let (a, b) = (0.8, 1.3);
        let out = integrate_h4_column(0.0, &|_| 0.0, &ts, b * b, 2.0 * a * b).unwrap();
        for (k, (h, _)) in out.iter().enumerate() {
            let t = ts[k];
            assert!((h - (a * t + b).powi(2)).abs() < 1e-8);
        }
        let eq = integrate_h4_column(1.0, &|_| 0.0, &ts, 2.0, 0.0).unwrap();
        assert!(eq.iter().all(|(h, hp)| *h == 2.0 && *hp == 0.0));
    }

    #[test]
    fn h3const_family_satisfies_reduced_equations() {
        let g = grid(20);
        let data = H3ConstData {
            h3_0: -1.0,
            upsilon2: jet_fn(|u| 0.5 + (u[0] * u[2]).scale(0.2)),
            upsilon4: constant(0.0),
            h4_init: jet_fn(|u| 2.0 + u[0].scale(0.3)),
            dh4_init: jet_fn(|u| 1.0 + u[1].scale(0.2)),
            n: NIntegration { n1: [0.0.into(), 0.0.into()], n2: [1.0.into(), 0.5.into()] },
        };
        let sol = generate_family_h3const(&data, &g, &SolveOptions::default()).unwrap();
        let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
        assert!(rep.max_234() < 1e-6, "{:?}", rep.norms);
    }

    #[test]
    fn constphi_examples() {
        let g = grid(12);
        let data = ConstPhiData {
            f: jet_fn(|u| u[2] + 1.0).into(),
            upsilon2: 0.0.into(),
            upsilon4: constant(0.0),
            h_0: 1.0,
            sigma40: 1.0.into(),
            n: NIntegration::default(),
        };
        let sol = generate_family_constphi(&data, &g, &SolveOptions::default()).unwrap();
        assert!(sol.sigma_upsilon.as_ref().unwrap().values.iter().all(|v| *v == 1.0));
        assert!(sol.w[0].values.iter().all(|v| *v == 0.0));
        let id = constphi_identity_residual(&sol, DerivativeMode::Analytic).unwrap();
        assert!(id.iter().all(|v| v.abs() < 1e-8));
        let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
        assert!(rep.max_234() < 1e-12, "{:?}", rep.norms);
        let mut cosmo = data.clone();
        cosmo.upsilon2 = jet_fn(|u| (u[2] * 0.5).scale(0.01)).into();
        let s2 = generate_family_constphi(&cosmo, &g, &SolveOptions::default()).unwrap();
        assert!(s2.w.iter().all(|w| w.values.iter().all(|v| *v == 0.0)));
        assert!(lc_constraint_check(&s2, LC_TOL, DerivativeMode::Analytic).pass);
    }

    #[test]
    fn constphi_eq3_holds_with_x_dependent_sigma() {
        let g = grid(14);
        let data = ConstPhiData {
            f: jet_fn(|u| u[2] + 1.0 + u[0].scale(0.1)).into(),
            upsilon2: jet_fn(|u| (u[1] + 1.0).scale(0.02)).into(),
            upsilon4: constant(0.0),
            h_0: 1.0,
            sigma40: 1.0.into(),
            n: NIntegration { n1: [0.0.into(), 0.0.into()], n2: [1.0.into(), 1.0.into()] },
        };
        let sol = generate_family_constphi(&data, &g, &SolveOptions::default()).unwrap();
        let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
        assert!(rep.norms[2].max < 1e-10 && rep.norms[3].max < 1e-10, "{:?}", rep.norms);
    }

    #[test]
    fn lc_gate_cosmological_and_flip() {
        let g = grid(12);
        let mut gen = GeneratingData::new(jet_fn(|u| u[2] + (u[2] * u[2]).scale(0.2)), 1.0);
        gen.h4_0 = 40.0.into();
        gen.n.n1 = [jet_fn(|u| u[1]).into(), jet_fn(|u| u[0]).into()];
        let sol = generate_family_a(&gen, &g, &SolveOptions::default()).unwrap();
        let rep = lc_constraint_check(&sol, LC_TOL, DerivativeMode::Analytic);
        assert!(rep.pass, "{:?}", rep.max);
        let spec = sol.metric_spec();
        let mut zmax: f64 = 0.0;
        for u in [[0.3, 0.4, 0.5, 0.0], [0.71, 0.12, 0.93, 1.0], [0.05, 0.95, 0.2, -2.0]] {
            zmax = zmax.max(max_abs3(&distortion(&spec, &ChartPoint::from_coords(u).unwrap()).unwrap()));
        }
        assert!(zmax < 1e-8, "{zmax}");
        gen.n.n2 = [0.5.into(), 0.0.into()];
        let sol2 = generate_family_a(&gen, &g, &SolveOptions::default()).unwrap();
        let rep2 = lc_constraint_check(&sol2, LC_TOL, DerivativeMode::Analytic);
        assert!(!rep2.pass);
        assert_eq!(rep2.dominant, "n_star");
        let spec2 = sol2.metric_spec();
        let z2 = max_abs3(&distortion(&spec2, &ChartPoint::from_coords([0.3, 0.4, 0.5, 0.0]).unwrap()).unwrap());
        assert!(z2 > 1e-3);
    }

    #[test]
    fn conformal_condition_examples() {
        let g = grid(6);
        let data = VacuumData {
            h3: (-1.0).into(),
            w: [0.0.into(), 0.0.into()],
            h4_0: 1.0.into(),
            n: NIntegration::default(),
            upsilon2: 0.0.into(),
            upsilon4: constant(0.0),
        };
        let sol = generate_family_vacuum(&data, &g, &SolveOptions::default()).unwrap();
        let one = check_conformal_condition(&1.0, &sol, 0.0, DerivativeMode::Analytic).unwrap();
        assert!(one.iter().all(|r| r == &[0.0, 0.0]));
        let ox = jet_fn(|u| u[0].sin() + 2.0);
        let r = check_conformal_condition(ox.as_ref(), &sol, 0.0, DerivativeMode::Analytic).unwrap();
        assert!((r[g.index(3, 2, 1)][0] - g.x1.at(3).cos()).abs() < 1e-14);
        let oy = jet_fn(|u| u[3].cos());
        let r = check_conformal_condition(oy.as_ref(), &sol, 0.7, DerivativeMode::Analytic).unwrap();
        assert!(r.iter().all(|x| x == &[0.0, 0.0]));
    }

    #[test]
    fn signature_validator_and_phi_star_errors() {
        let g = grid(8);
        let mut gen = demo_a();
        gen.sign = Sign::Plus;
        assert!(matches!(generate_family_a(&gen, &g, &SolveOptions::default()), Err(Error::SignatureMismatch { .. })));
        let flat_phi = GeneratingData::new(jet_fn(|u| u[0]), 1.0);
        assert!(matches!(generate_family_a(&flat_phi, &g, &SolveOptions::default()), Err(Error::Degenerate { .. })));
        let mut small = demo_a();
        small.h4_0 = 1.0.into();
        assert!(generate_family_a(&small, &g, &SolveOptions::default()).is_err());
    }

    #[test]
    fn h3const_positive_branch() {
        let g = grid(16);
        let data = H3ConstData {
            h3_0: 1.0,
            upsilon2: constant(0.3),
            upsilon4: constant(0.0),
            h4_init: constant(1.5),
            dh4_init: constant(0.4),
            n: NIntegration::default(),
        };
        let opts = SolveOptions { signature: Some([1, 1]), ..Default::default() };
        let sol = generate_family_h3const(&data, &g, &opts).unwrap();
        let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
        assert!(rep.norms[1].max < 1e-6, "{:?}", rep.norms);
        let mut still = data.clone();
        still.upsilon2 = constant(0.0);
        still.dh4_init = constant(0.0);
        let s = generate_family_h3const(&still, &g, &opts).unwrap();
        assert!(s.h4.values.iter().all(|v| *v == 1.5));
    }

    #[test]
    fn constphi_linear_f_identity() {
        let a = crate::grid::Axis::new(0.0, 1.0, 9).unwrap();
        let g = Grid3::new(a, a, crate::grid::Axis::new(0.5, 1.5, 9).unwrap()).unwrap();
        let data = ConstPhiData {
            f: jet_fn(|u| u[2]).into(),
            upsilon2: 0.0.into(),
            upsilon4: constant(0.0),
            h_0: 1.0,
            sigma40: 1.0.into(),
            n: NIntegration::default(),
        };
        let sol = generate_family_constphi(&data, &g, &SolveOptions::default()).unwrap();
        for p in 0..g.len() {
            let t = g.point(p, 0.0)[2];
            assert_eq!(sol.h3.values[p], -1.0);
            assert!((sol.h4.values[p] - t * t).abs() < 1e-15);
        }
        let id = constphi_identity_residual(&sol, DerivativeMode::Analytic).unwrap();
        assert!(id.iter().all(|v| v.abs() < 1e-12));
        let mut off = data.clone();
        off.sigma40 = 2.0.into();
        let s2 = generate_family_constphi(&off, &g, &SolveOptions::default()).unwrap();
        let id2 = constphi_identity_residual(&s2, DerivativeMode::Analytic).unwrap();
        assert!(id2.iter().all(|v| (v - (2f64.sqrt() - 1.0)).abs() < 1e-12));
    }

    #[test]
    fn family_a_finite_difference_bound_on_mild_data() {
        let g = grid(32);
        let mut gen = GeneratingData::new(jet_fn(|u| u[2].scale(0.3) + (u[0].sin() * u[1].sin()).scale(0.05)), 1.0);
        gen.h4_0 = 20.0.into();
        gen.n.n2 = [0.5.into(), 0.2.into()];
        let opts = SolveOptions { mode: DerivativeMode::FiniteDifference, ..Default::default() };
        let sol = generate_family_a(&gen, &g, &opts).unwrap();
        let fd = residuals(&sol, DerivativeMode::FiniteDifference).unwrap();
        assert!(fd.max_234() < 1e-3, "{:?}", fd.norms);
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let g = grid(5);
        let sol = generate_family_a(&demo_a(), &g, &SolveOptions::default()).unwrap();
        let csv = sol.to_csv();
        assert_eq!(csv.lines().count(), g.len() + 1);
        assert!(csv.starts_with("x1,x2,t,g1,g2,h3,h4,w1,w2,n1,n2"));
        let meta = sol.metadata(serde_json::json!({"r234": 1e-6}), None);
        assert_eq!(meta["family"], "a");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]

        #[test]
        fn vacuum_reduced_equations_hold_for_any_w(a in -2.0f64..2.0, b in -2.0f64..2.0, h3 in -3.0f64..-0.1) {
            let g = grid(6);
            let data = VacuumData {
                h3: h3.into(),
                w: [jet_fn(move |u| (u[0] * u[2]).scale(a).sin()).into(), jet_fn(move |u| (u[1] * u[2]).scale(b)).into()],
                h4_0: 1.0.into(),
                n: NIntegration { n1: [0.5.into(), 0.0.into()], n2: [1.0.into(), 1.0.into()] },
                upsilon2: 0.0.into(),
                upsilon4: constant(0.0),
            };
            let sol = generate_family_vacuum(&data, &g, &SolveOptions::default()).unwrap();
            let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
            proptest::prop_assert_eq!(rep.norms[1].max, 0.0);
            proptest::prop_assert_eq!(rep.norms[2].max, 0.0);
        }

        #[test]
        fn family_a_meets_residual_tolerance(amp in -0.2f64..0.2, k in 0.5f64..2.0, upsilon2 in 0.8f64..1.5) {
            let g = grid(8);
            let phi: Field = jet_fn(move |u| u[2] + (u[0].scale(k).sin() * u[1].cos()).scale(amp));
            let mut d = GeneratingData::new(phi, upsilon2);
            d.h4_0 = 20.0.into();
            let sol = generate_family_a(&d, &g, &SolveOptions::default()).unwrap();
            let rep = residuals(&sol, DerivativeMode::Analytic).unwrap();
            proptest::prop_assert!(rep.max_234() < 1e-8, "{}", rep.max_234());
        }
    }
}
