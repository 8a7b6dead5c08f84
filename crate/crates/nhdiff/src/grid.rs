//! Rectangular node lattices over `(x1, x2)` and `(x1, x2, t)`, grid-sampled
//! fields and second-order finite differences on them.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{field_jet, DerivativeMode, Jet, JetError, ScalarField};
use crate::{Error, Result};

/// Node-inclusive uniform axis: `points` nodes from `start` to `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

impl Axis {
    pub fn new(start: f64, end: f64, points: usize) -> Result<Self> {
        let a = Axis { start, end, points };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) {
            return Err(Error::InvalidInput("axis bounds must be finite".into()));
        }
        if self.end <= self.start {
            return Err(Error::InvalidInput(format!("axis end {} must exceed start {}", self.end, self.start)));
        }
        if self.points < 4 {
            return Err(Error::InvalidInput(format!("axis needs at least 4 points, got {}", self.points)));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.end - self.start) / (self.points - 1) as f64
    }

    pub fn at(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.end
        } else {
            self.start + i as f64 * self.step()
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.at(i)).collect()
    }

    /// Cell index and fractional offset for linear interpolation, clamped to the axis.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let s = ((x - self.start) / self.step()).clamp(0.0, (self.points - 1) as f64);
        let i = (s.floor() as usize).min(self.points - 2);
        (i, s - i as f64)
    }
}

/// `(x1, x2)` lattice; flat index `i * n2 + j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid2 {
    pub x1: Axis,
    pub x2: Axis,
}

impl Grid2 {
    pub fn new(x1: Axis, x2: Axis) -> Result<Self> {
        x1.validate()?;
        x2.validate()?;
        Ok(Grid2 { x1, x2 })
    }

    pub fn len(&self) -> usize {
        self.x1.points * self.x2.points
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.x2.points + j
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.x1.points || j + 1 == self.x2.points
    }
}

/// `(x1, x2, t)` lattice with `t` fastest; flat index `(i * n2 + j) * nt + k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid3 {
    pub x1: Axis,
    pub x2: Axis,
    pub t: Axis,
}

impl Grid3 {
    pub fn new(x1: Axis, x2: Axis, t: Axis) -> Result<Self> {
        x1.validate()?;
        x2.validate()?;
        t.validate()?;
        Ok(Grid3 { x1, x2, t })
    }

    pub fn cube(lo: f64, hi: f64, points: usize) -> Result<Self> {
        let a = Axis::new(lo, hi, points)?;
        Ok(Grid3 { x1: a, x2: a, t: a })
    }

    pub fn h_grid(&self) -> Grid2 {
        Grid2 { x1: self.x1, x2: self.x2 }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.x1.points, self.x2.points, self.t.points]
    }

    pub fn len(&self) -> usize {
        self.x1.points * self.x2.points * self.t.points
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn columns(&self) -> usize {
        self.x1.points * self.x2.points
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.x2.points + j) * self.t.points + k
    }

    pub fn unindex(&self, idx: usize) -> [usize; 3] {
        let nt = self.t.points;
        let n2 = self.x2.points;
        [idx / (n2 * nt), (idx / nt) % n2, idx % nt]
    }

    pub fn steps(&self) -> [f64; 3] {
        [self.x1.step(), self.x2.step(), self.t.step()]
    }

    pub fn axis(&self, a: usize) -> &Axis {
        match a {
            0 => &self.x1,
            1 => &self.x2,
            _ => &self.t,
        }
    }

    /// Chart point `(x1, x2, t, y)` of node `idx`.
    pub fn point(&self, idx: usize, y: f64) -> [f64; 4] {
        let [i, j, k] = self.unindex(idx);
        [self.x1.at(i), self.x2.at(j), self.t.at(k), y]
    }
}

/// Second-order first derivative of a uniformly sampled line; one-sided at the ends.
pub fn diff1(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        d[i] = (v[i + 1] - v[i - 1]) / (2.0 * h);
    }
    d[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
    d[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h);
    d
}

/// Second-order second derivative of a uniformly sampled line; one-sided at the ends.
pub fn diff2(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    let h2 = h * h;
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        d[i] = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / h2;
    }
    d[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h2;
    d[n - 1] = (2.0 * v[n - 1] - 5.0 * v[n - 2] + 4.0 * v[n - 3] - v[n - 4]) / h2;
    d
}

/// Applies a line operator along `axis` of a `dims`-shaped array (last axis fastest).
pub fn along_axis(values: &[f64], dims: [usize; 3], axis: usize, op: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut out = vec![0.0; values.len()];
    let n = dims[axis];
    let mut line = vec![0.0; n];
    let (oa, ob) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for a in 0..dims[oa] {
        for b in 0..dims[ob] {
            let base = a * strides[oa] + b * strides[ob];
            for (m, slot) in line.iter_mut().enumerate() {
                *slot = values[base + m * strides[axis]];
            }
            let d = op(&line);
            for (m, dv) in d.into_iter().enumerate() {
                out[base + m * strides[axis]] = dv;
            }
        }
    }
    out
}

/// Derivative of grid values along `axis` (0 = x1, 1 = x2, 2 = t).
pub fn grid_diff(grid: &Grid3, values: &[f64], axis: usize) -> Vec<f64> {
    let h = grid.steps()[axis];
    along_axis(values, grid.dims(), axis, |l| diff1(l, h))
}

pub fn grid_diff2(grid: &Grid3, values: &[f64], axis: usize) -> Vec<f64> {
    let h = grid.steps()[axis];
    along_axis(values, grid.dims(), axis, |l| diff2(l, h))
}

/// Finite-difference jets of grid values; jet slots 0, 1, 2 are `x1, x2, t`, slot 3 is unused.
pub fn fd_locals(grid: &Grid3, values: &[f64]) -> Vec<Jet> {
    let d: Vec<Vec<f64>> = (0..3).map(|a| grid_diff(grid, values, a)).collect();
    let mut dd = vec![vec![Vec::new(); 3]; 3];
    for a in 0..3 {
        dd[a][a] = grid_diff2(grid, values, a);
        for b in a + 1..3 {
            dd[a][b] = grid_diff(grid, &d[a], b);
        }
    }
    (0..values.len())
        .map(|p| {
            let mut j = Jet::constant(values[p]);
            for a in 0..3 {
                j.g[a] = d[a][p];
                j.h[a][a] = dd[a][a][p];
                for b in a + 1..3 {
                    j.h[a][b] = dd[a][b][p];
                    j.h[b][a] = dd[a][b][p];
                }
            }
            j
        })
        .collect()
}

/// Values on a [`Grid3`], optionally with per-node jets.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub values: Vec<f64>,
    pub jets: Option<Vec<Jet>>,
}

impl GridField {
    pub fn from_values(values: Vec<f64>) -> Self {
        GridField { values, jets: None }
    }

    pub fn from_jets(jets: Vec<Jet>) -> Self {
        GridField { values: jets.iter().map(|j| j.v).collect(), jets: Some(jets) }
    }

    pub fn constant(grid: &Grid3, c: f64) -> Self {
        GridField::from_jets(vec![Jet::constant(c); grid.len()])
    }

    /// Samples `f` at `y`; jets are attached unless `mode` is finite-difference.
    pub fn sample(f: &dyn ScalarField, grid: &Grid3, y: f64, mode: DerivativeMode, name: &str) -> Result<Self> {
        if mode == DerivativeMode::FiniteDifference {
            let values = (0..grid.len()).into_par_iter().map(|p| f.value(&grid.point(p, y))).collect();
            return Ok(GridField::from_values(values));
        }
        let jets = (0..grid.len())
            .into_par_iter()
            .map(|p| {
                let u = grid.point(p, y);
                field_jet(f, &u, mode).map_err(|e| match e {
                    JetError::MissingAnalytic => Error::MissingAnalytic(name.to_string()),
                    JetError::Mismatch { analytic, finite_difference, .. } => Error::DerivativeMismatch {
                        name: name.to_string(),
                        analytic,
                        finite_difference,
                    },
                })
            })
            .collect::<Result<Vec<Jet>>>()?;
        Ok(GridField::from_jets(jets))
    }

    /// Node jets: the stored ones unless `mode` forces finite differences of the values.
    pub fn locals(&self, grid: &Grid3, mode: DerivativeMode) -> Cow<'_, [Jet]> {
        match (&self.jets, mode) {
            (Some(j), DerivativeMode::Analytic | DerivativeMode::CrossCheck) => Cow::Borrowed(j.as_slice()),
            _ => Cow::Owned(fd_locals(grid, &self.values)),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Drops stored jets.
    pub fn strip(&mut self) {
        self.jets = None;
    }
}

/// Trilinear interpolation of grid data as a chart field independent of `y`.
///
/// With stored jets the gradient is interpolated from the node gradients;
/// otherwise it is the interpolant's own gradient.
pub struct GridInterp {
    grid: Grid3,
    values: Vec<f64>,
    grads: Option<Vec<[f64; 3]>>,
}

impl GridInterp {
    pub fn new(grid: Grid3, field: &GridField) -> Self {
        let grads = field.jets.as_ref().map(|js| js.iter().map(|j| [j.g[0], j.g[1], j.g[2]]).collect());
        GridInterp { grid, values: field.values.clone(), grads }
    }

    fn cell(&self, u: &[f64; 4]) -> ([usize; 3], [f64; 3]) {
        let mut c = [0; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            let (i, s) = self.grid.axis(a).locate(u[a]);
            c[a] = i;
            f[a] = s;
        }
        (c, f)
    }

    /// Interpolant of `data` plus its gradient in physical units.
    fn interp(&self, c: [usize; 3], f: [f64; 3], data: impl Fn(usize) -> f64) -> (f64, [f64; 3]) {
        let h = self.grid.steps();
        let mut v = 0.0;
        let mut g = [0.0; 3];
        for corner in 0..8 {
            let o = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
            let w: [f64; 3] = std::array::from_fn(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] });
            let dw: [f64; 3] = std::array::from_fn(|a| if o[a] == 1 { 1.0 } else { -1.0 });
            let x = data(self.grid.index(c[0] + o[0], c[1] + o[1], c[2] + o[2]));
            v += w[0] * w[1] * w[2] * x;
            g[0] += dw[0] * w[1] * w[2] * x / h[0];
            g[1] += w[0] * dw[1] * w[2] * x / h[1];
            g[2] += w[0] * w[1] * dw[2] * x / h[2];
        }
        (v, g)
    }
}

impl ScalarField for GridInterp {
    fn value(&self, u: &[f64; 4]) -> f64 {
        let (c, f) = self.cell(u);
        self.interp(c, f, |p| self.values[p]).0
    }

    fn jet(&self, u: &[f64; 4]) -> Option<Jet> {
        let (c, f) = self.cell(u);
        let (v, own) = self.interp(c, f, |p| self.values[p]);
        let mut j = Jet::constant(v);
        match &self.grads {
            Some(gr) => {
                for a in 0..3 {
                    let (ga, dga) = self.interp(c, f, |p| gr[p][a]);
                    j.g[a] = ga;
                    for b in 0..3 {
                        j.h[a][b] = dga[b];
                    }
                }
                for a in 0..3 {
                    for b in a + 1..3 {
                        let s = 0.5 * (j.h[a][b] + j.h[b][a]);
                        j.h[a][b] = s;
                        j.h[b][a] = s;
                    }
                }
            }
            None => {
                j.g[..3].copy_from_slice(&own);
                j.h = mixed_hessian(&self.grid, &self.values, c, f);
            }
        }
        Some(j)
    }
}

/// Hessian of the trilinear interpolant: pure second derivatives vanish inside a cell.
fn mixed_hessian(grid: &Grid3, values: &[f64], c: [usize; 3], f: [f64; 3]) -> [[f64; 4]; 4] {
    let h = grid.steps();
    let mut out = [[0.0; 4]; 4];
    for corner in 0..8 {
        let o = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let w: [f64; 3] = std::array::from_fn(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] });
        let dw: [f64; 3] = std::array::from_fn(|a| if o[a] == 1 { 1.0 / h[a] } else { -1.0 / h[a] });
        let x = values[grid.index(c[0] + o[0], c[1] + o[1], c[2] + o[2])];
        out[0][1] += dw[0] * dw[1] * w[2] * x;
        out[0][2] += dw[0] * w[1] * dw[2] * x;
        out[1][2] += w[0] * dw[1] * dw[2] * x;
    }
    out[1][0] = out[0][1];
    out[2][0] = out[0][2];
    out[2][1] = out[1][2];
    out
}
