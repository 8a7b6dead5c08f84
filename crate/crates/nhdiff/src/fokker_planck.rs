//! Diffusion generators on chart lattices and their forward and backward evolution.
//!
//! A generator is assembled as a sparse matrix acting on node values. The forward
//! (Fokker–Planck) operator is the transpose under the `sqrt|g|`-weighted inner
//! product, so duality and mass conservation hold to round-off.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{ChartPoint, MetricSpec, PointData};
use crate::grid::Grid2;
use crate::io::{fmt17, Csv};
use crate::sde::{hyperbolic_metric, v_time, SdeSystem};
use crate::{Error, Result};

/// Minimum nodes per lattice axis.
pub const MIN_NODES: usize = 8;
/// Stability constant `C` in `dt <= C dx^2 / (rho lambda_max)`.
pub const STABILITY_C: f64 = 0.4;
const NEGATIVE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Cell-centred nodes, wrap-around neighbours.
    #[default]
    Periodic,
    /// Node-inclusive axes; boundary nodes keep their initial values.
    Absorbing,
}

/// One lattice axis along chart coordinate `coord`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeAxis {
    pub coord: usize,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

/// Rectangular lattice over up to four chart coordinates; the rest are held at `fixed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lattice {
    pub axes: Vec<LatticeAxis>,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default)]
    pub fixed: [f64; 4],
}

impl Lattice {
    pub fn new(axes: Vec<LatticeAxis>, boundary: Boundary) -> Result<Self> {
        let l = Lattice { axes, boundary, fixed: [0.0; 4] };
        l.validate()?;
        Ok(l)
    }

    /// Square lattice `[lo, hi]^2` over `(x1, x2)`.
    pub fn square(lo: f64, hi: f64, n: usize, boundary: Boundary) -> Result<Self> {
        Lattice::new((0..2).map(|coord| LatticeAxis { coord, lo, hi, n }).collect(), boundary)
    }

    pub fn with_fixed(mut self, fixed: [f64; 4]) -> Self {
        self.fixed = fixed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.len() > 4 {
            return Err(Error::InvalidInput(format!("lattice needs 1 to 4 axes, got {}", self.axes.len())));
        }
        for (k, a) in self.axes.iter().enumerate() {
            if a.n < MIN_NODES {
                return Err(Error::InvalidInput(format!("grid too coarse: axis {k} has {} nodes, need at least {MIN_NODES}", a.n)));
            }
            if !(a.lo.is_finite() && a.hi.is_finite() && a.hi > a.lo) {
                return Err(Error::InvalidInput(format!("axis {k} bounds [{}, {}] are invalid", a.lo, a.hi)));
            }
            if a.coord > 3 || self.axes[..k].iter().any(|b| b.coord == a.coord) {
                return Err(Error::InvalidInput(format!("axis {k} coordinate {} is out of range or repeated", a.coord)));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self, k: usize) -> f64 {
        let a = &self.axes[k];
        match self.boundary {
            Boundary::Periodic => (a.hi - a.lo) / a.n as f64,
            Boundary::Absorbing => (a.hi - a.lo) / (a.n - 1) as f64,
        }
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.step(k)).product()
    }

    pub fn node(&self, k: usize, i: usize) -> f64 {
        let a = &self.axes[k];
        match self.boundary {
            Boundary::Periodic => a.lo + (i as f64 + 0.5) * self.step(k),
            Boundary::Absorbing => a.lo + i as f64 * self.step(k),
        }
    }

    /// Multi-index of a flat index; the last axis runs fastest.
    pub fn unindex(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            out[k] = idx % self.axes[k].n;
            idx /= self.axes[k].n;
        }
        out
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.axes).fold(0, |acc, (i, a)| acc * a.n + i)
    }

    /// Lattice coordinates of a node, in axis order.
    pub fn state(&self, idx: usize) -> Vec<f64> {
        self.unindex(idx).iter().enumerate().map(|(k, &i)| self.node(k, i)).collect()
    }

    /// Full chart point of a node.
    pub fn point(&self, idx: usize) -> [f64; 4] {
        let mut u = self.fixed;
        for (k, x) in self.state(idx).into_iter().enumerate() {
            u[self.axes[k].coord] = x;
        }
        u
    }

    /// Neighbour along axis `k` at offset `off`, wrapping on periodic lattices.
    pub fn neighbor(&self, idx: usize, k: usize, off: isize) -> Option<usize> {
        let mut m = self.unindex(idx);
        let n = self.axes[k].n as isize;
        let j = m[k] as isize + off;
        m[k] = match self.boundary {
            Boundary::Periodic => j.rem_euclid(n) as usize,
            Boundary::Absorbing if (0..n).contains(&j) => j as usize,
            Boundary::Absorbing => return None,
        };
        Some(self.index(&m))
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        self.boundary == Boundary::Absorbing
            && self.unindex(idx).iter().zip(&self.axes).any(|(&i, a)| i == 0 || i + 1 == a.n)
    }

    /// Cell containing the lattice-coordinate point `x`; periodic lattices wrap.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut m = vec![0; self.dim()];
        for (k, a) in self.axes.iter().enumerate() {
            let dx = self.step(k);
            let s = match self.boundary {
                Boundary::Periodic => ((x[k] - a.lo) / dx).floor().rem_euclid(a.n as f64),
                Boundary::Absorbing => ((x[k] - a.lo) / dx + 0.5).floor(),
            };
            if !(s >= 0.0 && s < a.n as f64) {
                return None;
            }
            m[k] = s as usize;
        }
        Some(self.index(&m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Ito,
    Stratonovich,
    Adjoint,
    LaplaceBeltrami,
    VelocityLaplacian,
}

/// Sparse generator: `(L f)_i = sum_j rows[i][j].1 * f[rows[i][j].0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorStencil {
    pub kind: GeneratorKind,
    pub lattice: Lattice,
    /// Node weights of the inner product (`sqrt|g|`, or `sqrt|h|` on velocity lattices).
    pub weight: Vec<f64>,
    /// Nodes whose values are held fixed by time stepping.
    pub held: Vec<bool>,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl GeneratorStencil {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.rows.par_iter().map(|r| r.iter().map(|&(j, a)| a * f[j]).sum()).collect()
    }

    /// Weighted discrete inner product `sum w f g dV`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        let dv = self.lattice.cell_volume();
        self.weight.iter().zip(f).zip(g).map(|((w, a), b)| w * a * b).sum::<f64>() * dv
    }

    /// Weighted transpose `*L_ij = L_ji w_j / w_i`; held rows stay empty.
    pub fn adjoint(&self) -> GeneratorStencil {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.len()];
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, a) in r {
                if !self.held[j] {
                    rows[j].push((i, a * self.weight[i] / self.weight[j]));
                }
            }
        }
        for r in rows.iter_mut() {
            r.sort_by_key(|e| e.0);
        }
        GeneratorStencil { kind: GeneratorKind::Adjoint, lattice: self.lattice.clone(), weight: self.weight.clone(), held: self.held.clone(), rows }
    }

    /// `|<L f, g> - <f, *L g>|`.
    pub fn duality_residual(&self, adjoint: &GeneratorStencil, f: &[f64], g: &[f64]) -> f64 {
        (self.inner(&self.apply(f), g) - self.inner(f, &adjoint.apply(g))).abs()
    }

    /// `|<L f, g> - <f, L g>|`.
    pub fn self_adjointness_residual(&self, f: &[f64], g: &[f64]) -> f64 {
        (self.inner(&self.apply(f), g) - self.inner(f, &self.apply(g))).abs()
    }

    /// Sum of each row, i.e. the action on constants.
    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|e| e.1).sum()).collect()
    }

    pub fn max_diagonal(&self) -> f64 {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().filter(|e| e.0 == i).map(|e| e.1.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `dt max |L_ii|`; for the isotropic 2-d heat operator this is `2 rho lambda dt / dx^2`,
    /// so the bound `dt <= C dx^2 / (rho lambda)` reads `stability_number <= 2 C`.
    pub fn stability_number(&self, dt: f64) -> f64 {
        dt * self.max_diagonal()
    }

    pub fn check_stability(&self, dt: f64) -> Result<()> {
        let s = self.stability_number(dt);
        if !(s <= 2.0 * STABILITY_C) {
            return Err(Error::Stability(format!(
                "dt = {dt} gives dt * max|L_ii| = {s:.4} > {}; use dt <= {:e}",
                2.0 * STABILITY_C,
                2.0 * STABILITY_C / self.max_diagonal()
            )));
        }
        Ok(())
    }

    /// Rebuilds a stencil from rows after a (deterministic) change of coefficients.
    fn merge_rows(rows: Vec<Vec<(usize, f64)>>) -> Vec<Vec<(usize, f64)>> {
        rows.into_iter()
            .map(|mut r| {
                r.sort_by_key(|e| e.0);
                let mut out: Vec<(usize, f64)> = Vec::with_capacity(r.len());
                for (j, a) in r {
                    match out.last_mut() {
                        Some(last) if last.0 == j => last.1 += a,
                        _ => out.push((j, a)),
                    }
                }
                out
            })
            .collect()
    }
}

/// Second-order operator `a^{mu nu} d_mu d_nu + b^mu d_mu` in lattice coordinates.
struct Coefficients {
    /// Row-major `dim x dim`, symmetric.
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Central-difference stencil of the operator whose coefficients `coef` returns per node.
fn from_coefficients<F>(lattice: &Lattice, kind: GeneratorKind, weight: Vec<f64>, coef: F) -> Result<GeneratorStencil>
where
    F: Fn(usize) -> Result<Coefficients> + Sync,
{
    lattice.validate()?;
    let d = lattice.dim();
    let held: Vec<bool> = (0..lattice.len()).map(|i| lattice.is_boundary(i)).collect();
    let steps: Vec<f64> = (0..d).map(|k| lattice.step(k)).collect();
    let rows = (0..lattice.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<(usize, f64)>> {
            if held[i] {
                return Ok(Vec::new());
            }
            let c = coef(i)?;
            let nb = |k: usize, off: isize| lattice.neighbor(i, k, off).expect("interior node has neighbours");
            let mut r = Vec::with_capacity(1 + 2 * d + 2 * d * d);
            for mu in 0..d {
                let h = steps[mu];
                let a = c.a[mu * d + mu] / (h * h);
                let b = c.b[mu] / (2.0 * h);
                r.push((nb(mu, 1), a + b));
                r.push((nb(mu, -1), a - b));
                r.push((i, -2.0 * a));
                for nu in mu + 1..d {
                    let a = 2.0 * c.a[mu * d + nu] / (4.0 * h * steps[nu]);
                    if a == 0.0 {
                        continue;
                    }
                    let p = nb(mu, 1);
                    let m = nb(mu, -1);
                    let corner = |base: usize, off: isize| lattice.neighbor(base, nu, off).expect("interior node has neighbours");
                    r.push((corner(p, 1), a));
                    r.push((corner(p, -1), -a));
                    r.push((corner(m, 1), -a));
                    r.push((corner(m, -1), a));
                }
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratorStencil { kind, lattice: lattice.clone(), weight, held, rows: GeneratorStencil::merge_rows(rows) })
}

fn node_data(spec: &MetricSpec, lattice: &Lattice, idx: usize) -> Result<PointData> {
    PointData::eval(spec, &ChartPoint::from_coords(lattice.point(idx))?)
}

/// `sqrt|det g|` at every node.
pub fn volume_weight(spec: &MetricSpec, lattice: &Lattice) -> Result<Vec<f64>> {
    (0..lattice.len())
        .into_par_iter()
        .map(|i| Ok(node_data(spec, lattice, i)?.adapted_diag().iter().product::<f64>().abs().sqrt()))
        .collect()
}

/// Generator coefficients of `(rho/2) sum_k (sigma_k^alpha e_alpha)(sigma_k^beta e_beta) + b^alpha e_alpha`
/// with `sigma` and `b` in lattice components.
fn sde_coefficients(pd: &PointData, lattice: &Lattice, sigma: &[f64], noise: usize, drift: &[f64], rho: f64) -> Coefficients {
    let d = lattice.dim();
    let c: Vec<usize> = lattice.axes.iter().map(|a| a.coord).collect();
    let e = pd.frame();
    let de = pd.frame_gradient();
    let mut s = vec![0.0; d * d];
    for al in 0..d {
        for be in 0..d {
            s[al * d + be] = (0..noise).map(|k| sigma[al * noise + k] * sigma[be * noise + k]).sum();
        }
    }
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for mu in 0..d {
        for nu in 0..d {
            let mut acc = 0.0;
            for al in 0..d {
                for be in 0..d {
                    acc += s[al * d + be] * e[c[al]][c[mu]] * e[c[be]][c[nu]];
                }
            }
            a[mu * d + nu] = 0.5 * rho * acc;
        }
    }
    for nu in 0..d {
        let mut acc = 0.0;
        for al in 0..d {
            acc += drift[al] * e[c[al]][c[nu]];
            for be in 0..d {
                let ede: f64 = (0..d).map(|mu| e[c[al]][c[mu]] * de[c[be]][c[nu]][c[mu]]).sum();
                acc += 0.5 * rho * s[al * d + be] * ede;
            }
        }
        b[nu] = acc;
    }
    Coefficients { a, b }
}

fn check_system(sys: &SdeSystem, lattice: &Lattice, rho: f64) -> Result<()> {
    lattice.validate()?;
    if sys.dim != lattice.dim() {
        return Err(Error::InvalidInput(format!("system dimension {} does not match lattice dimension {}", sys.dim, lattice.dim())));
    }
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidInput(format!("rho must be finite and nonnegative, got {rho}")));
    }
    Ok(())
}

/// Itô generator `A f = (rho/2) sigma sigma e e f + b e f`; the drift of `sys` is read as an Itô drift.
/// Coefficients are evaluated at `tau = 0`.
pub fn build_generator_ito(sys: &SdeSystem, spec: &MetricSpec, lattice: &Lattice, rho: f64) -> Result<GeneratorStencil> {
    check_system(sys, lattice, rho)?;
    let weight = volume_weight(spec, lattice)?;
    from_coefficients(lattice, GeneratorKind::Ito, weight, |i| {
        let pd = node_data(spec, lattice, i)?;
        let u = lattice.state(i);
        Ok(sde_coefficients(&pd, lattice, &(sys.sigma)(0.0, &u), sys.noise, &(sys.drift)(0.0, &u), rho))
    })
}

/// Stratonovich generator `(rho/2) sum_k L_k L_k + L_0` with `L_k = sigma_k e`, `L_0 = b e`;
/// the drift of `sys` is read as a Stratonovich drift.
pub fn build_generator_strat(sys: &SdeSystem, spec: &MetricSpec, lattice: &Lattice, rho: f64) -> Result<GeneratorStencil> {
    check_system(sys, lattice, rho)?;
    let weight = volume_weight(spec, lattice)?;
    let d = lattice.dim();
    let m = sys.noise;
    from_coefficients(lattice, GeneratorKind::Stratonovich, weight, |i| {
        let pd = node_data(spec, lattice, i)?;
        let e = pd.frame();
        let c: Vec<usize> = lattice.axes.iter().map(|a| a.coord).collect();
        let u = lattice.state(i);
        let sigma = (sys.sigma)(0.0, &u);
        let grad = sys.sigma_gradient(0.0, &u);
        let mut drift = (sys.drift)(0.0, &u);
        // L_k L_k = sigma sigma e e + sigma^alpha (e_alpha sigma^beta) e_beta
        for (be, db) in drift.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..m {
                for al in 0..d {
                    let e_sigma: f64 = (0..d).map(|mu| e[c[al]][c[mu]] * grad[mu * d * m + be * m + k]).sum();
                    acc += sigma[al * m + k] * e_sigma;
                }
            }
            *db += 0.5 * rho * acc;
        }
        Ok(sde_coefficients(&pd, lattice, &sigma, m, &drift, rho))
    })
}

/// Drift d-vector in N-adapted components at a chart point.
pub type AdaptedDrift = dyn Fn(&[f64; 4]) -> [f64; 4] + Sync;

fn lb_coefficients(pd: &PointData, lattice: &Lattice, scale: f64, drift: Option<[f64; 4]>) -> Coefficients {
    let d = lattice.dim();
    let c: Vec<usize> = lattice.axes.iter().map(|a| a.coord).collect();
    let e = pd.frame();
    let de = pd.frame_gradient();
    let g = pd.adapted_diag();
    let gam = pd.canonical_gamma();
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for al in 0..4 {
        for mu in 0..d {
            for nu in 0..d {
                a[mu * d + nu] += scale * e[al][c[mu]] * e[al][c[nu]] / g[al];
            }
        }
        for nu in 0..d {
            let mut s: f64 = (0..d).map(|mu| e[al][c[mu]] * de[al][c[nu]][c[mu]]).sum();
            for lam in 0..4 {
                s -= gam[lam][al][al] * e[lam][c[nu]];
            }
            b[nu] += scale * s / g[al];
        }
    }
    if let Some(v) = drift {
        for nu in 0..d {
            b[nu] += (0..4).map(|al| v[al] * e[al][c[nu]]).sum::<f64>();
        }
    }
    Coefficients { a, b }
}

/// `scale` times the Laplace–Beltrami operator of the canonical d-connection, restricted
/// to functions of the lattice coordinates.
pub fn build_laplace_beltrami(spec: &MetricSpec, lattice: &Lattice, scale: f64) -> Result<GeneratorStencil> {
    let weight = volume_weight(spec, lattice)?;
    from_coefficients(lattice, GeneratorKind::LaplaceBeltrami, weight, |i| Ok(lb_coefficients(&node_data(spec, lattice, i)?, lattice, scale, None)))
}

/// Backward generator `(rho/2) Lap + A^nu e_nu` of the forward equation solved by [`fokker_planck_evolve`].
pub fn build_fp_generator(spec: &MetricSpec, lattice: &Lattice, rho: f64, drift: Option<&AdaptedDrift>) -> Result<GeneratorStencil> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidInput(format!("rho must be finite and nonnegative, got {rho}")));
    }
    let weight = volume_weight(spec, lattice)?;
    from_coefficients(lattice, GeneratorKind::Ito, weight, |i| {
        let pd = node_data(spec, lattice, i)?;
        let v = drift.map(|f| f(&lattice.point(i)));
        Ok(lb_coefficients(&pd, lattice, 0.5 * rho, v))
    })
}

/// Velocity-space Laplace–Beltrami `(1/sqrt|h|) d_eps (sqrt|h| h^{eps mu} d_mu)` on a lattice of `v_hat`.
///
/// Axis `coord` selects the velocity component. Pure second differences use face fluxes with
/// no flux through the lattice boundary; mixed terms use `D_eps K D_mu` with central `D` and
/// zero values outside. Both pieces are symmetric, so the operator is self-adjoint under the
/// `sqrt|h| = 1 / v_time` weight.
pub fn build_velocity_laplacian(lattice: &Lattice) -> Result<GeneratorStencil> {
    lattice.validate()?;
    if lattice.axes.iter().any(|a| a.coord > 2) {
        return Err(Error::InvalidInput("velocity lattice axes must select components 0, 1 or 2".into()));
    }
    let d = lattice.dim();
    let n = lattice.len();
    let vel = |state: &[f64]| -> [f64; 3] {
        let mut v = [0.0; 3];
        for (k, x) in state.iter().enumerate() {
            v[lattice.axes[k].coord] = *x;
        }
        v
    };
    let mut weight = Vec::with_capacity(n);
    for i in 0..n {
        let v = vel(&lattice.state(i));
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("velocity lattice node {i}")));
        }
        weight.push(1.0 / v_time(&v));
    }
    // K^{eps mu} = sqrt|h| h^{eps mu} with h^{-1} = I + v v^T
    let k_at = |v: &[f64; 3], e: usize, m: usize| -> f64 {
        let ce = lattice.axes[e].coord;
        let cm = lattice.axes[m].coord;
        (if ce == cm { 1.0 } else { 0.0 } + v[ce] * v[cm]) / v_time(v)
    };
    let steps: Vec<f64> = (0..d).map(|k| lattice.step(k)).collect();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        let si = lattice.state(i);
        for e in 0..d {
            if let Some(j) = lattice.neighbor(i, e, 1) {
                let mut face = si.clone();
                face[e] += 0.5 * steps[e];
                let kf = k_at(&vel(&face), e, e) / (steps[e] * steps[e]);
                rows[i].push((i, -kf));
                rows[i].push((j, kf));
                rows[j].push((j, -kf));
                rows[j].push((i, kf));
            }
        }
        for e in 0..d {
            for m in 0..d {
                if e == m {
                    continue;
                }
                // (D_e K D_m f)_i = sum_{s = +-1} s / (2 dx_e) K_j (f_{j+m} - f_{j-m}) / (2 dx_m), j = i + s e
                for s in [1isize, -1] {
                    let Some(j) = lattice.neighbor(i, e, s) else { continue };
                    let kj = k_at(&vel(&lattice.state(j)), e, m) / (4.0 * steps[e] * steps[m]);
                    for t in [1isize, -1] {
                        if let Some(l) = lattice.neighbor(j, m, t) {
                            rows[i].push((l, (s * t) as f64 * kj));
                        }
                    }
                }
            }
        }
    }
    let rows = GeneratorStencil::merge_rows(rows)
        .into_iter()
        .zip(&weight)
        .map(|(r, w)| r.into_iter().map(|(j, a)| (j, a / w)).collect())
        .collect();
    Ok(GeneratorStencil { kind: GeneratorKind::VelocityLaplacian, lattice: lattice.clone(), weight, held: vec![false; n], rows })
}

/// Explicit RK2 (Heun) steps of `df/dtau = L f`; held nodes keep their values.
fn rk2(op: &GeneratorStencil, f: &mut [f64], dt: f64, steps: usize, mut after: impl FnMut(usize, &mut [f64]) -> Result<()>) -> Result<()> {
    let mut stage = vec![0.0; f.len()];
    for s in 0..steps {
        let k1 = op.apply(f);
        for i in 0..f.len() {
            stage[i] = if op.held[i] { f[i] } else { f[i] + dt * k1[i] };
        }
        let k2 = op.apply(&stage);
        for i in 0..f.len() {
            if !op.held[i] {
                f[i] += 0.5 * dt * (k1[i] + k2[i]);
            }
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("time step {}", s + 1)));
        }
        after(s + 1, f)?;
    }
    Ok(())
}

fn step_count(tau_end: f64, dt: f64) -> Result<(usize, f64)> {
    if !(tau_end >= 0.0 && tau_end.is_finite() && dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("need tau_end >= 0 and dt > 0, got {tau_end}, {dt}")));
    }
    let n = (tau_end / dt - 1e-9).ceil().max(0.0) as usize;
    Ok(if n == 0 { (0, dt) } else { (n, tau_end / n as f64) })
}

/// `f(tau_end)` for `df/dtau = A f`, `f(0) = f0`. Steps are shortened so that they end exactly at `tau_end`.
pub fn kolmogorov_backward_evolve(gen: &GeneratorStencil, f0: &[f64], tau_end: f64, dt: f64) -> Result<Vec<f64>> {
    if f0.len() != gen.len() {
        return Err(Error::InvalidInput(format!("function has {} values, lattice has {}", f0.len(), gen.len())));
    }
    let (n, h) = step_count(tau_end, dt)?;
    gen.check_stability(h)?;
    let mut f = f0.to_vec();
    rk2(gen, &mut f, h, n, |_, _| Ok(()))?;
    Ok(f)
}

/// Density samples on a lattice with the `sqrt|g|` weight of their mass.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub lattice: Lattice,
    pub values: Vec<f64>,
    pub weight: Vec<f64>,
    pub tau: f64,
    /// `(tau, mass)` samples.
    pub mass_history: Vec<[f64; 2]>,
    /// Smallest value seen before clamping.
    pub min_before_clamp: f64,
    /// Number of node values clamped to zero.
    pub clamped: usize,
}

impl DensityGrid {
    pub fn new(lattice: Lattice, weight: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        lattice.validate()?;
        if values.len() != lattice.len() || weight.len() != lattice.len() {
            return Err(Error::InvalidInput("density and weight must have one value per node".into()));
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -NEGATIVE_TOL {
            return Err(Error::InvalidInput(format!("density has negative value {min:e}")));
        }
        let mut g = DensityGrid { lattice, values, weight, tau: 0.0, mass_history: Vec::new(), min_before_clamp: min, clamped: 0 };
        g.mass_history.push([0.0, g.mass()]);
        Ok(g)
    }

    /// Density proportional to `f` at the nodes, normalized to unit mass.
    pub fn from_fn(spec: &MetricSpec, lattice: &Lattice, f: impl Fn(&[f64; 4]) -> f64) -> Result<Self> {
        let weight = volume_weight(spec, lattice)?;
        let values = (0..lattice.len()).map(|i| f(&lattice.point(i))).collect();
        let mut g = DensityGrid::new(lattice.clone(), weight, values)?;
        g.normalize()?;
        Ok(g)
    }

    /// Mollified delta: unit mass in the cell containing `x` (lattice coordinates).
    pub fn point_mass(spec: &MetricSpec, lattice: &Lattice, x: &[f64]) -> Result<Self> {
        let weight = volume_weight(spec, lattice)?;
        let i = lattice.locate(x).ok_or_else(|| Error::InvalidInput(format!("point {x:?} is outside the lattice")))?;
        let mut values = vec![0.0; lattice.len()];
        values[i] = 1.0 / (weight[i] * lattice.cell_volume());
        DensityGrid::new(lattice.clone(), weight, values)
    }

    /// Normalized histogram of sample points (lattice coordinates); samples outside are dropped.
    pub fn from_samples<'a>(lattice: &Lattice, weight: Vec<f64>, samples: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut counts = vec![0.0; lattice.len()];
        let mut total = 0usize;
        for s in samples {
            total += 1;
            if let Some(i) = lattice.locate(s) {
                counts[i] += 1.0;
            }
        }
        if total == 0 {
            return Err(Error::InvalidInput("no samples".into()));
        }
        let dv = lattice.cell_volume();
        let values = counts.iter().zip(&weight).map(|(c, w)| c / (total as f64 * w * dv)).collect();
        DensityGrid::new(lattice.clone(), weight, values)
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().zip(&self.weight).map(|(v, w)| v * w).sum::<f64>() * self.lattice.cell_volume()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let m = self.mass();
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidInput(format!("density has mass {m}")));
        }
        self.values.iter_mut().for_each(|v| *v /= m);
        self.mass_history = vec![[self.tau, 1.0]];
        Ok(())
    }

    /// Aggregates `factor^dim` blocks of cells; periodic lattices whose axes divide evenly only.
    pub fn coarsen(&self, factor: usize) -> Result<DensityGrid> {
        let l = &self.lattice;
        if l.boundary != Boundary::Periodic || factor == 0 || l.axes.iter().any(|a| a.n % factor != 0) {
            return Err(Error::InvalidInput(format!("cannot coarsen this lattice by {factor}")));
        }
        let coarse = Lattice { axes: l.axes.iter().map(|a| LatticeAxis { n: a.n / factor, ..*a }).collect(), ..l.clone() };
        coarse.validate()?;
        let mut mass = vec![0.0; coarse.len()];
        let mut wsum = vec![0.0; coarse.len()];
        for i in 0..self.values.len() {
            let m: Vec<usize> = l.unindex(i).iter().map(|k| k / factor).collect();
            let j = coarse.index(&m);
            mass[j] += self.values[i] * self.weight[i];
            wsum[j] += self.weight[i];
        }
        let blocks = factor.pow(l.dim() as u32) as f64;
        let weight: Vec<f64> = wsum.iter().map(|w| w / blocks).collect();
        // mass[j] * dV_fine / (w_j dV_coarse)
        let values = mass.iter().zip(&weight).map(|(m, w)| m / (w * blocks)).collect();
        let mut out = DensityGrid::new(coarse, weight, values)?;
        out.tau = self.tau;
        Ok(out)
    }

    /// `sum |p - q| w dV`.
    pub fn l1_distance(&self, other: &DensityGrid) -> f64 {
        let dv = self.lattice.cell_volume();
        self.values.iter().zip(&other.values).zip(&self.weight).map(|((a, b), w)| (a - b).abs() * w).sum::<f64>() * dv
    }

    /// Largest relative mass change per unit time over the history.
    pub fn mass_drift_rate(&self) -> f64 {
        let m0 = self.mass_history[0][1];
        self.mass_history
            .iter()
            .skip(1)
            .map(|h| (h[1] - m0).abs() / m0.abs().max(f64::MIN_POSITIVE) / h[0].max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    /// Lattice indices, coordinates and value per node.
    pub fn to_csv(&self) -> String {
        let d = self.lattice.dim();
        let mut header: Vec<String> = (0..d).map(|k| format!("i{k}")).collect();
        header.extend((0..d).map(|k| format!("u{}", self.lattice.axes[k].coord)));
        header.push("density".into());
        let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut c = Csv::new(&h);
        for i in 0..self.values.len() {
            let ids: Vec<u64> = self.lattice.unindex(i).iter().map(|&x| x as u64).collect();
            let mut row = self.lattice.state(i);
            row.push(self.values[i]);
            c.row_with_ids(&ids, &row);
        }
        c.finish()
    }

    pub fn metadata(&self, scheme: &str) -> serde_json::Value {
        serde_json::json!({
            "tau": fmt17(self.tau),
            "scheme": scheme,
            "mass_history": self.mass_history.iter().map(|m| [fmt17(m[0]), fmt17(m[1])]).collect::<Vec<_>>(),
            "min_before_clamp": fmt17(self.min_before_clamp),
            "clamped": self.clamped,
        })
    }
}

/// Evolves a density under the forward operator `forward` (usually a generator's [`GeneratorStencil::adjoint`]).
pub fn evolve_density(forward: &GeneratorStencil, phi0: &DensityGrid, tau_end: f64, dt: f64) -> Result<DensityGrid> {
    if forward.lattice != phi0.lattice {
        return Err(Error::InvalidInput("density and operator live on different lattices".into()));
    }
    let (n, h) = step_count(tau_end, dt)?;
    forward.check_stability(h)?;
    let mut out = phi0.clone();
    let record = (n / 100).max(1);
    let dv = phi0.lattice.cell_volume();
    let weight = phi0.weight.clone();
    let tau0 = phi0.tau;
    let mut min_seen = out.min_before_clamp;
    let mut clamped = out.clamped;
    let mut history = out.mass_history.clone();
    rk2(forward, &mut out.values, h, n, |s, f| {
        let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
        min_seen = min_seen.min(min);
        if min < -NEGATIVE_TOL {
            for v in f.iter_mut().filter(|v| **v < 0.0) {
                *v = 0.0;
                clamped += 1;
            }
        }
        if s % record == 0 || s == n {
            let m = f.iter().zip(&weight).map(|(v, w)| v * w).sum::<f64>() * dv;
            history.push([tau0 + s as f64 * h, m]);
        }
        Ok(())
    })?;
    out.tau = tau0 + n as f64 * h;
    out.min_before_clamp = min_seen;
    out.clamped = clamped;
    out.mass_history = history;
    if phi0.lattice.boundary == Boundary::Periodic {
        let rate = out.mass_drift_rate();
        if rate > 1e-6 {
            return Err(Error::Conservation(format!("mass changes by {rate:e} per unit tau")));
        }
    }
    Ok(out)
}

/// Forward equation `dF/dtau = -(1/sqrt|g|) e_nu (sqrt|g| A^nu F) + (rho/2) Lap F`.
pub fn fokker_planck_evolve(
    spec: &MetricSpec,
    drift: Option<&AdaptedDrift>,
    rho: f64,
    phi0: &DensityGrid,
    tau_end: f64,
    dt: f64,
) -> Result<DensityGrid> {
    let gen = build_fp_generator(spec, &phi0.lattice, rho, drift)?;
    evolve_density(&gen.adjoint(), phi0, tau_end, dt)
}

// ---------------------------------------------------------------------------
// h-space diffusion

/// `f(tau)` at each of the sorted times `taus` for `df/dtau = (rho/2) e^{-psi} (f_11 + f_22)`,
/// the h-block Laplace–Beltrami of `g_ij = delta_ij e^psi`. Boundary nodes keep their initial values.
pub fn h_diffusion_slices(grid: &Grid2, psi: &[f64], f0: &[f64], taus: &[f64], rho: f64) -> Result<Vec<Vec<f64>>> {
    let n = grid.len();
    if psi.len() != n || f0.len() != n {
        return Err(Error::InvalidInput("psi and f0 need one value per h-grid node".into()));
    }
    if grid.x1.points < MIN_NODES || grid.x2.points < MIN_NODES {
        return Err(Error::InvalidInput(format!("grid too coarse: need at least {MIN_NODES} nodes per axis")));
    }
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidInput(format!("rho must be finite and nonnegative, got {rho}")));
    }
    if taus.iter().any(|t| !(*t >= 0.0 && t.is_finite())) || taus.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("times must be finite, nonnegative and sorted".into()));
    }
    let (h1, h2) = (grid.x1.step(), grid.x2.step());
    let coef: Vec<f64> = psi.iter().map(|p| 0.5 * rho * (-p).exp()).collect();
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("e^-psi".into()));
    }
    let dmax = coef.iter().cloned().fold(0.0, f64::max);
    let dt_max = if dmax > 0.0 { STABILITY_C * h1.min(h2).powi(2) / (2.0 * dmax) } else { f64::INFINITY };
    let (n1, n2) = (grid.x1.points, grid.x2.points);
    let lap = |f: &[f64]| -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .map(|idx| {
                let (i, j) = (idx / n2, idx % n2);
                if i == 0 || j == 0 || i + 1 == n1 || j + 1 == n2 {
                    return 0.0;
                }
                let c = f[idx];
                coef[idx] * ((f[idx + n2] - 2.0 * c + f[idx - n2]) / (h1 * h1) + (f[idx + 1] - 2.0 * c + f[idx - 1]) / (h2 * h2))
            })
            .collect()
    };
    let mut f = f0.to_vec();
    let mut now = 0.0;
    let mut out = Vec::with_capacity(taus.len());
    for &target in taus {
        let span = target - now;
        if span > 0.0 && dmax > 0.0 {
            let steps = (span / dt_max).ceil() as usize;
            let dt = span / steps as f64;
            for _ in 0..steps {
                let k1 = lap(&f);
                let mid: Vec<f64> = f.iter().zip(&k1).map(|(a, k)| a + dt * k).collect();
                let k2 = lap(&mid);
                for i in 0..n {
                    f[i] += 0.5 * dt * (k1[i] + k2[i]);
                }
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("h-diffusion state".into()));
            }
        }
        now = target;
        out.push(f.clone());
    }
    Ok(out)
}

/// `f(tau_end)` of [`h_diffusion_slices`].
pub fn h_diffusion_solve(grid: &Grid2, psi: &[f64], f0: &[f64], tau_end: f64, rho: f64) -> Result<Vec<f64>> {
    Ok(h_diffusion_slices(grid, psi, f0, &[tau_end], rho)?.pop().expect("one slice"))
}

/// Printed hyperboloid coefficients at a velocity node, for diagnostics.
pub fn velocity_metric_at(lattice: &Lattice, idx: usize) -> crate::sde::HyperbolicMetric {
    let mut v = [0.0; 3];
    for (k, x) in lattice.state(idx).into_iter().enumerate() {
        v[lattice.axes[k].coord] = x;
    }
    hyperbolic_metric(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{constant, jet_fn};
    use crate::grid::Axis;
    use crate::sde::{Interpretation, SdeSystem};
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn flat_e() -> MetricSpec {
        MetricSpec::flat()
    }

    fn identity_noise(d: usize) -> SdeSystem {
        SdeSystem::new(
            d,
            d,
            Arc::new(move |_, _| (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()),
            Arc::new(move |_, _| vec![0.0; d]),
            Interpretation::Ito,
        )
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen::<f64>() - 0.5).collect()
    }

    #[test]
    fn coarse_lattice_is_rejected() {
        assert!(Lattice::square(0.0, 1.0, 7, Boundary::Periodic).is_err());
        assert!(Lattice::square(0.0, 1.0, 8, Boundary::Periodic).is_ok());
    }

    #[test]
    fn identity_noise_gives_half_laplacian() {
        let l = Lattice::square(0.0, 1.0, 10, Boundary::Periodic).unwrap();
        let g = build_generator_ito(&identity_noise(2), &flat_e(), &l, 1.0).unwrap();
        let h2 = l.step(0).powi(2);
        for (i, r) in g.rows.iter().enumerate() {
            assert_eq!(r.len(), 5);
            for &(j, a) in r {
                let want = if i == j { -2.0 / h2 } else { 0.5 / h2 };
                assert!((a - want).abs() < 1e-9 * want.abs());
            }
        }
        assert!(g.row_sums().iter().all(|s| s.abs() < 1e-9));
    }

    #[test]
    fn drift_on_linear_function() {
        let l = Lattice::square(0.0, 1.0, 12, Boundary::Absorbing).unwrap();
        let sys = SdeSystem::new(2, 2, Arc::new(|_, _| vec![1.0, 0.0, 0.0, 1.0]), Arc::new(|_, _| vec![1.0, 0.0]), Interpretation::Ito);
        let g = build_generator_ito(&sys, &flat_e(), &l, 1.0).unwrap();
        let f: Vec<f64> = (0..l.len()).map(|i| l.state(i)[0]).collect();
        let af = g.apply(&f);
        for i in 0..l.len() {
            if !l.is_boundary(i) {
                assert!((af[i] - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quadratic_reproduces_diffusion_coefficient() {
        let spec = MetricSpec::flat().with_n(2, 0, jet_fn(|u| u[1].scale(0.3)));
        let l = Lattice::new(
            vec![LatticeAxis { coord: 0, lo: 0.0, hi: 1.0, n: 12 }, LatticeAxis { coord: 2, lo: 0.0, hi: 1.0, n: 12 }],
            Boundary::Absorbing,
        )
        .unwrap()
        .with_fixed([0.0, 0.5, 0.0, 0.0]);
        let g = build_generator_ito(&identity_noise(2), &spec, &l, 2.0).unwrap();
        // e_1 = d_1 - 0.15 d_t, so A (x1)^2 = 2 and A t^2 = 2 (1 + 0.15^2)
        let x2: Vec<f64> = (0..l.len()).map(|i| l.state(i)[0].powi(2)).collect();
        let t2: Vec<f64> = (0..l.len()).map(|i| l.state(i)[1].powi(2)).collect();
        let (a, b) = (g.apply(&x2), g.apply(&t2));
        for i in (0..l.len()).filter(|&i| !l.is_boundary(i)) {
            assert!((a[i] - 2.0).abs() < 1e-9, "{}", a[i]);
            assert!((b[i] - 2.0 * (1.0 + 0.0225)).abs() < 1e-9, "{}", b[i]);
        }
    }

    #[test]
    fn strat_and_ito_with_constant_sigma_agree() {
        let l = Lattice::square(-1.0, 1.0, 10, Boundary::Periodic).unwrap();
        let sys = SdeSystem::new(2, 2, Arc::new(|_, _| vec![0.7, 0.2, -0.1, 1.1]), Arc::new(|_, u| vec![u[1], -u[0]]), Interpretation::Ito);
        let a = build_generator_ito(&sys, &flat_e(), &l, 0.8).unwrap();
        let b = build_generator_strat(&sys, &flat_e(), &l, 0.8).unwrap();
        let f = random_vec(l.len(), 1);
        let (x, y) = (a.apply(&f), b.apply(&f));
        assert!(x.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-12 * (1.0 + p.abs())));
        assert!(b.apply(&vec![3.0; l.len()]).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn strat_minus_ito_is_drift_correction() {
        let l = Lattice::new(vec![LatticeAxis { coord: 0, lo: 0.5, hi: 2.0, n: 16 }], Boundary::Absorbing).unwrap();
        let sys = SdeSystem::scalar(|_, u| u, |_, _| 0.0, Interpretation::Stratonovich);
        let rho = 0.6;
        let a = build_generator_ito(&sys, &flat_e(), &l, rho).unwrap();
        let b = build_generator_strat(&sys, &flat_e(), &l, rho).unwrap();
        let f: Vec<f64> = (0..l.len()).map(|i| l.state(i)[0].sin()).collect();
        let (x, y) = (a.apply(&f), b.apply(&f));
        let h = l.step(0);
        for i in (0..l.len()).filter(|&i| !l.is_boundary(i)) {
            let u = l.state(i)[0];
            let df = (f[i + 1] - f[i - 1]) / (2.0 * h);
            assert!((y[i] - x[i] - 0.5 * rho * u * df).abs() < 1e-6);
        }
    }

    fn curved() -> MetricSpec {
        MetricSpec::diagonal(
            [jet_fn(|u| u[0].sin().scale(0.2) + 1.0), jet_fn(|u| u[1].cos().scale(0.3) + 1.5)],
            [constant(-1.0), constant(1.0)],
        )
        .with_n(2, 0, jet_fn(|u| u[1].scale(0.5)))
    }

    #[test]
    fn periodic_duality() {
        let l = Lattice::square(0.0, std::f64::consts::TAU, 16, Boundary::Periodic).unwrap();
        let sys = SdeSystem::new(2, 2, Arc::new(|_, u| vec![1.0 + 0.3 * u[0].sin(), 0.1, 0.0, 0.8]), Arc::new(|_, u| vec![u[1].cos(), 0.2]), Interpretation::Ito);
        for g in [
            build_generator_ito(&sys, &curved(), &l, 1.3).unwrap(),
            build_generator_strat(&sys, &curved(), &l, 1.3).unwrap(),
            build_laplace_beltrami(&curved(), &l, 1.0).unwrap(),
        ] {
            let adj = g.adjoint();
            let (f, p) = (random_vec(l.len(), 2), random_vec(l.len(), 3));
            assert!(g.duality_residual(&adj, &f, &p) < 1e-8);
        }
    }

    #[test]
    fn adjoint_matches_divergence_form() {
        // *A phi = (1/w) [d d (w a phi) - d (w b phi)] for A = a d^2 + b d in 1-d, w = 1
        let errs: Vec<f64> = [32usize, 64]
            .iter()
            .map(|&n| {
                let l = Lattice::new(vec![LatticeAxis { coord: 0, lo: 0.0, hi: std::f64::consts::TAU, n }], Boundary::Periodic).unwrap();
                let sys = SdeSystem::scalar(|_, u| 1.0 + 0.5 * u.sin(), |_, u| u.cos(), Interpretation::Ito);
                let adj = build_generator_ito(&sys, &flat_e(), &l, 1.0).unwrap().adjoint();
                let phi: Vec<f64> = (0..n).map(|i| l.state(i)[0].cos().exp()).collect();
                let got = adj.apply(&phi);
                (0..n)
                    .map(|i| {
                        let x = l.state(i)[0];
                        // a = s^2 / 2, s = 1 + sin/2; b = cos; p = e^{cos}
                        let eps = 1e-4;
                        let flux = |x: f64| {
                            let a = |x: f64| 0.5 * (1.0 + 0.5 * x.sin()).powi(2) * x.cos().exp();
                            (a(x + eps) - a(x - eps)) / (2.0 * eps) - x.cos() * x.cos().exp()
                        };
                        let want = (flux(x + eps) - flux(x - eps)) / (2.0 * eps);
                        (got[i] - want).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!(errs[1] < 1e-2 && errs[0] / errs[1] > 3.5, "{errs:?}");
    }

    #[test]
    fn constant_is_stationary_and_drift_is_transported() {
        let l = Lattice::square(0.0, 1.0, 20, Boundary::Absorbing).unwrap();
        let sys = SdeSystem::new(2, 2, Arc::new(|_, _| vec![0.0; 4]), Arc::new(|_, _| vec![0.5, 0.0]), Interpretation::Ito);
        let g = build_generator_ito(&sys, &flat_e(), &l, 1.0).unwrap();
        let c = kolmogorov_backward_evolve(&g, &vec![2.5; l.len()], 0.3, 0.01).unwrap();
        assert!(c.iter().all(|v| (v - 2.5).abs() < 1e-13));
        let f0: Vec<f64> = (0..l.len()).map(|i| l.state(i)[0]).collect();
        // two RK2 steps: the held boundary reaches 4 nodes inwards
        let f = kolmogorov_backward_evolve(&g, &f0, 0.02, 0.01).unwrap();
        for i in 0..l.len() {
            if l.unindex(i).iter().all(|&k| (5..15).contains(&k)) {
                assert!((f[i] - f0[i] - 0.01).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stability_bound_is_enforced() {
        let l = Lattice::square(0.0, 1.0, 20, Boundary::Periodic).unwrap();
        let g = build_generator_ito(&identity_noise(2), &flat_e(), &l, 1.0).unwrap();
        let dx2 = l.step(0).powi(2);
        assert!(kolmogorov_backward_evolve(&g, &vec![0.0; l.len()], 0.1, 0.41 * dx2).is_err());
        assert!(kolmogorov_backward_evolve(&g, &vec![0.0; l.len()], 0.01, 0.39 * dx2).is_ok());
    }

    fn gaussian_heat(s0: f64, tau: f64, r2: f64) -> f64 {
        let s = s0 * s0 + tau;
        s0 * s0 / s * (-r2 / (2.0 * s)).exp()
    }

    #[test]
    fn backward_heat_kernel() {
        let l = Lattice::square(-5.0, 5.0, 64, Boundary::Periodic).unwrap();
        let g = build_generator_ito(&identity_noise(2), &flat_e(), &l, 1.0).unwrap();
        let r2 = |i: usize| l.state(i).iter().map(|x| x * x).sum::<f64>();
        let f0: Vec<f64> = (0..l.len()).map(|i| gaussian_heat(1.0, 0.0, r2(i))).collect();
        let f = kolmogorov_backward_evolve(&g, &f0, 0.25, 0.005).unwrap();
        let err = (0..l.len()).map(|i| (f[i] - gaussian_heat(1.0, 0.25, r2(i))).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn forward_equilibrates_and_conserves_mass() {
        let l = Lattice::square(0.0, 1.0, 16, Boundary::Periodic).unwrap();
        let spec = flat_e();
        let phi0 = DensityGrid::point_mass(&spec, &l, &[0.5, 0.5]).unwrap();
        let dt = 0.3 * l.step(0).powi(2);
        let out = fokker_planck_evolve(&spec, None, 1.0, &phi0, 1.0, dt).unwrap();
        assert!((out.mass() - 1.0).abs() < 1e-8);
        assert!(out.mass_drift_rate() < 1e-8);
        assert!(out.values.iter().all(|v| (v - 1.0).abs() < 1e-3));
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn forward_heat_kernel_l1() {
        let l = Lattice::square(-6.0, 6.0, 64, Boundary::Periodic).unwrap();
        let spec = flat_e();
        let dens = |tau: f64| move |u: &[f64; 4]| gaussian_heat(1.0, tau, u[0] * u[0] + u[1] * u[1]);
        let phi0 = DensityGrid::from_fn(&spec, &l, dens(0.0)).unwrap();
        let out = fokker_planck_evolve(&spec, None, 1.0, &phi0, 0.25, 0.01).unwrap();
        let exact = DensityGrid::from_fn(&spec, &l, dens(0.25)).unwrap();
        assert!(out.l1_distance(&exact) < 1e-3, "{}", out.l1_distance(&exact));
    }

    #[test]
    fn curved_forward_conserves_weighted_mass() {
        let l = Lattice::square(0.0, std::f64::consts::TAU, 24, Boundary::Periodic).unwrap();
        let spec = curved();
        let drift = |u: &[f64; 4]| [0.3 * u[1].sin(), 0.2, 0.0, 0.0];
        let phi0 = DensityGrid::from_fn(&spec, &l, |u| 1.0 + 0.5 * u[0].cos()).unwrap();
        let out = fokker_planck_evolve(&spec, Some(&drift), 0.8, &phi0, 1.0, 0.005).unwrap();
        assert!((out.mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn forward_matches_monte_carlo() {
        use crate::sde::{integrate_ito, Sampling, WienerConfig};
        // fine FP cells, histogram bins of 3 x 3 cells
        let l = Lattice::square(-6.3, 6.3, 63, Boundary::Periodic).unwrap();
        let spec = flat_e();
        let fp = fokker_planck_evolve(&spec, None, 1.0, &DensityGrid::point_mass(&spec, &l, &[0.0, 0.0]).unwrap(), 1.0, 0.01).unwrap();
        let ens = integrate_ito(&identity_noise(2), &[0.0, 0.0], &WienerConfig::new(1.0, 2, 5, 0.1, 10), &Sampling::endpoints(100_000)).unwrap();
        let coarse = fp.coarsen(3).unwrap();
        let mc = DensityGrid::from_samples(&coarse.lattice, coarse.weight.clone(), ens.terminal_states()).unwrap();
        let d = coarse.l1_distance(&mc);
        assert!((coarse.mass() - 1.0).abs() < 1e-12);
        assert!(d < 0.05, "{d}");
    }

    #[test]
    fn negative_density_rejected_and_samples_histogram() {
        let l = Lattice::square(0.0, 1.0, 8, Boundary::Periodic).unwrap();
        assert!(DensityGrid::new(l.clone(), vec![1.0; 64], vec![-1.0; 64]).is_err());
        let pts = [[0.01, 0.01], [1.01, 0.01]];
        let h = DensityGrid::from_samples(&l, vec![1.0; 64], pts.iter().map(|p| &p[..])).unwrap();
        assert!((h.mass() - 1.0).abs() < 1e-12);
        assert_eq!(h.values[0], 2.0 / (2.0 * l.cell_volume()));
    }

    fn hgrid(lo: f64, hi: f64, n: usize) -> Grid2 {
        Grid2::new(Axis::new(lo, hi, n).unwrap(), Axis::new(lo, hi, n).unwrap()).unwrap()
    }

    #[test]
    fn h_diffusion_heat_kernel_and_constants() {
        let g = hgrid(-6.0, 6.0, 97);
        let xs = g.x1.coords();
        let r2: Vec<f64> = (0..g.len()).map(|i| xs[i / 97].powi(2) + xs[i % 97].powi(2)).collect();
        let f0: Vec<f64> = r2.iter().map(|r| gaussian_heat(1.0, 0.0, *r)).collect();
        let psi = vec![0.0; g.len()];
        let f = h_diffusion_solve(&g, &psi, &f0, 0.5, 2.0).unwrap();
        // rho = 2 gives d f / d tau = Lap f, i.e. the kernel at time 2 tau
        let err = (0..g.len()).map(|i| (f[i] - gaussian_heat(1.0, 1.0, r2[i])).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
        let c = h_diffusion_solve(&g, &psi, &vec![1.5; g.len()], 0.5, 2.0).unwrap();
        assert!(c.iter().all(|v| *v == 1.5));
        assert_eq!(h_diffusion_solve(&g, &psi, &f0, 0.0, 1.0).unwrap(), f0);
    }

    #[test]
    fn h_diffusion_conformal_rescaling() {
        let g = hgrid(-4.0, 4.0, 41);
        let f0: Vec<f64> = (0..g.len()).map(|i| ((i * 7919) % 13) as f64).collect();
        let c = 0.7;
        let a = h_diffusion_solve(&g, &vec![c; g.len()], &f0, 0.3, 1.0).unwrap();
        let b = h_diffusion_solve(&g, &vec![0.0; g.len()], &f0, 0.3 * (-c).exp(), 1.0).unwrap();
        let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    fn vlattice(lo: f64, hi: f64, n: usize) -> Lattice {
        Lattice::new((0..3).map(|coord| LatticeAxis { coord, lo, hi, n }).collect(), Boundary::Absorbing).unwrap()
    }

    #[test]
    fn velocity_laplacian_is_self_adjoint() {
        let l = vlattice(-1.5, 1.5, 9);
        let g = build_velocity_laplacian(&l).unwrap();
        let (f, p) = (random_vec(l.len(), 4), random_vec(l.len(), 5));
        assert!(g.self_adjointness_residual(&f, &p) < 1e-8);
        let one = g.apply(&vec![1.0; l.len()]);
        for i in 0..l.len() {
            if l.unindex(i).iter().all(|&k| (2..7).contains(&k)) {
                assert!(one[i].abs() < 1e-9, "{}", one[i]);
            }
        }
        let l1 = Lattice::new(vec![LatticeAxis { coord: 1, lo: -2.0, hi: 2.0, n: 12 }], Boundary::Absorbing).unwrap();
        let g1 = build_velocity_laplacian(&l1).unwrap();
        assert!(g1.self_adjointness_residual(&random_vec(12, 6), &random_vec(12, 7)) < 1e-8);
    }

    #[test]
    fn velocity_laplacian_small_velocity_limit() {
        let h = 0.01;
        let l = vlattice(-4.0 * h, 4.0 * h, 9);
        let g = build_velocity_laplacian(&l).unwrap();
        for idx in [l.index(&[4, 4, 4]), l.index(&[5, 4, 4]), l.index(&[6, 5, 4]), l.index(&[3, 3, 5])] {
            let v: f64 = l.state(idx).iter().map(|x| x * x).sum::<f64>().sqrt();
            let dev = g.rows[idx]
                .iter()
                .map(|&(j, a)| {
                    let flat = if j == idx {
                        -6.0
                    } else if (0..3).any(|k| [1, -1].iter().any(|&o| l.neighbor(idx, k, o) == Some(j))) {
                        1.0
                    } else {
                        0.0
                    };
                    (a * h * h - flat).abs()
                })
                .fold(0.0, f64::max);
            assert!(dev <= 4.0 * (v * v + v * h + h * h), "{v}: {dev}");
        }
        let m = velocity_metric_at(&l, l.index(&[4, 4, 4]));
        assert_eq!(m.v_time, 1.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn generator_and_adjoint_are_dual(seed in 0u64..10_000, rho in 0.1f64..3.0, a in -0.5f64..0.5) {
            let l = Lattice::square(0.0, std::f64::consts::TAU, 12, Boundary::Periodic).unwrap();
            let sys = SdeSystem::new(2, 2, Arc::new(move |_, u| vec![1.0 + a * u[0].sin(), 0.1, 0.0, 0.8]), Arc::new(move |_, u| vec![u[1].cos(), a]), Interpretation::Ito);
            for g in [build_generator_ito(&sys, &curved(), &l, rho).unwrap(), build_generator_strat(&sys, &curved(), &l, rho).unwrap()] {
                let adj = g.adjoint();
                let (f, p) = (random_vec(l.len(), seed), random_vec(l.len(), seed + 1));
                proptest::prop_assert!(g.duality_residual(&adj, &f, &p) < 1e-8);
            }
        }

        #[test]
        fn forward_evolution_conserves_mass(x in 0.05f64..0.95, y in 0.05f64..0.95, b in -0.5f64..0.5) {
            let l = Lattice::square(0.0, 1.0, 12, Boundary::Periodic).unwrap();
            let spec = flat_e();
            let drift = move |_: &[f64; 4]| [b, -b, 0.0, 0.0];
            let phi0 = DensityGrid::point_mass(&spec, &l, &[x, y]).unwrap();
            let dt = 0.2 * l.step(0).powi(2);
            let out = fokker_planck_evolve(&spec, Some(&drift), 1.0, &phi0, 0.05, dt).unwrap();
            proptest::prop_assert!((out.mass() - 1.0).abs() < 1e-9);
        }
    }
}
