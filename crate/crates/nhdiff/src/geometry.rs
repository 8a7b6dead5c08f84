//! Nonholonomic 2+2 geometry: N-adapted frames, anholonomy, the canonical
//! d-connection, its torsion, the distortion to Levi-Civita and the
//! Laplace-Beltrami d-operator.
//!
//! Index layout: every 4-index runs over `0..4` with h-indices `0, 1`
//! (`x1, x2`) and v-indices `2, 3` (`y3, y4`). Connection arrays follow
//!
//! ```text
//! D_{e_c} e_b = gamma[a][b][c] e_a
//! [e_a, e_b]  = anholonomy[c][a][b] e_c
//! torsion[c][a][b] = gamma[c][a][b] - gamma[c][b][a] + anholonomy[c][a][b]
//! ```
//!
//! The metric is
//!
//! ```text
//! g = g_i dx^i dx^i + h_a (dy^a + N^a_i dx^i)(dy^a + N^a_i dx^i)
//! e_i = d_i - N^a_i d_a,   e_a = d_a
//! ```

use crate::error::{Error, Result};
use crate::field::{constant, field_gradient, field_jet, DerivativeMode, Field, Jet, JetError, ScalarField};
use std::sync::Arc;

pub type Tensor3 = [[[f64; 4]; 4]; 4];
pub type Mat4 = [[f64; 4]; 4];

/// Below this magnitude a diagonal metric coefficient counts as degenerate.
pub const DEGENERACY_FLOOR: f64 = 1e-14;

pub const H_INDICES: [usize; 2] = [0, 1];
pub const V_INDICES: [usize; 2] = [2, 3];

pub fn zero3() -> Tensor3 {
    [[[0.0; 4]; 4]; 4]
}

pub fn identity4() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// Largest absolute entry of a rank-3 array.
pub fn max_abs3(t: &Tensor3) -> f64 {
    t.iter().flatten().flatten().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChartPoint {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl ChartPoint {
    pub fn new(x: [f64; 2], y: [f64; 2]) -> Result<Self> {
        Self::from_coords([x[0], x[1], y[0], y[1]])
    }

    pub fn from_coords(u: [f64; 4]) -> Result<Self> {
        if u.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("chart point {u:?}")));
        }
        Ok(ChartPoint { x: [u[0], u[1]], y: [u[2], u[3]] })
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x[0], self.x[1], self.y[0], self.y[1]]
    }
}

/// Diagonal d-metric `(g_1, g_2, h_3, h_4)` plus N-connection `N^a_k`.
#[derive(Clone)]
pub struct MetricSpec {
    pub g: [Field; 2],
    pub h: [Field; 2],
    /// `n[a][k]` holds `N^{a+3}_{k+1}`.
    pub n: [[Field; 2]; 2],
    /// Expected signs of `(g_1, g_2, h_3, h_4)`; `0` disables the check.
    pub signature: [i8; 4],
    pub mode: DerivativeMode,
}

const COEFF_NAMES: [&str; 4] = ["g1", "g2", "h3", "h4"];

impl MetricSpec {
    /// Diagonal d-metric with trivial N-connection and default signature `(+,+,-,+)`.
    pub fn diagonal(g: [Field; 2], h: [Field; 2]) -> Self {
        MetricSpec {
            g,
            h,
            n: [[constant(0.0), constant(0.0)], [constant(0.0), constant(0.0)]],
            signature: [1, 1, -1, 1],
            mode: DerivativeMode::Analytic,
        }
    }

    /// `diag(1, 1, -1, 1)` with `N = 0`.
    pub fn flat() -> Self {
        Self::diagonal([constant(1.0), constant(1.0)], [constant(-1.0), constant(1.0)])
    }

    /// Sets `N^{a}_{k}` for v-index `a` in `{2, 3}` and h-index `k` in `{0, 1}`.
    pub fn with_n(mut self, a: usize, k: usize, f: Field) -> Self {
        self.n[a - 2][k] = f;
        self
    }

    pub fn with_mode(mut self, mode: DerivativeMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_signature(mut self, signature: [i8; 4]) -> Self {
        self.signature = signature;
        self
    }

    /// Signature check: at most one negative entry, every entry in `{-1, 0, 1}`.
    pub fn validate_signature(&self) -> Result<()> {
        let negatives = self.signature.iter().filter(|&&s| s < 0).count();
        if self.signature.iter().any(|&s| !(-1..=1).contains(&s)) || negatives > 1 {
            return Err(Error::InvalidInput(format!(
                "signature {:?} is neither Riemannian nor a signed permutation of (+,+,-,+)",
                self.signature
            )));
        }
        Ok(())
    }

    fn diag_field(&self, alpha: usize) -> &Field {
        if alpha < 2 {
            &self.g[alpha]
        } else {
            &self.h[alpha - 2]
        }
    }
}

fn jet_error(name: &str, e: JetError) -> Error {
    match e {
        JetError::MissingAnalytic => Error::MissingAnalytic(name.to_string()),
        JetError::Mismatch { component, analytic, finite_difference } => Error::DerivativeMismatch {
            name: format!("d{component} {name}"),
            analytic,
            finite_difference,
        },
    }
}

/// Coefficient values and first partials at one point.
#[derive(Clone, Copy, Debug)]
pub struct PointData {
    pub u: [f64; 4],
    /// `g_1, g_2, h_3, h_4` with coordinate gradients.
    pub diag: [Jet; 4],
    /// `n[a][k]` as in [`MetricSpec::n`].
    pub n: [[Jet; 2]; 2],
}

impl PointData {
    pub fn eval(spec: &MetricSpec, u: &ChartPoint) -> Result<Self> {
        let coords = u.coords();
        let mut diag = [Jet::constant(0.0); 4];
        for (alpha, slot) in diag.iter_mut().enumerate() {
            let f = spec.diag_field(alpha);
            let j = field_gradient(f.as_ref(), &coords, spec.mode)
                .map_err(|e| jet_error(COEFF_NAMES[alpha], e))?;
            check_coefficient(COEFF_NAMES[alpha], j.v, spec.signature[alpha], coords)?;
            *slot = j;
        }
        let mut n = [[Jet::constant(0.0); 2]; 2];
        for a in 0..2 {
            for k in 0..2 {
                let name = format!("N{}_{}", a + 3, k + 1);
                let j = field_gradient(spec.n[a][k].as_ref(), &coords, spec.mode)
                    .map_err(|e| jet_error(&name, e))?;
                if !j.v.is_finite() || j.g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("{name} at {coords:?}")));
                }
                n[a][k] = j;
            }
        }
        Ok(PointData { u: coords, diag, n })
    }

    /// N-adapted frame rows `E[alpha][mu]`.
    pub fn frame(&self) -> Mat4 {
        let mut e = identity4();
        for a in 0..2 {
            for k in 0..2 {
                e[k][2 + a] = -self.n[a][k].v;
            }
        }
        e
    }

    /// Coframe rows `D[beta][mu]` so that `D[beta] . E[alpha] = delta`.
    pub fn coframe(&self) -> Mat4 {
        let mut d = identity4();
        for a in 0..2 {
            for k in 0..2 {
                d[2 + a][k] = self.n[a][k].v;
            }
        }
        d
    }

    /// Coordinate partials `dE[alpha][mu] / du^nu`, indexed `[alpha][mu][nu]`.
    pub fn frame_gradient(&self) -> Tensor3 {
        let mut de = zero3();
        for a in 0..2 {
            for k in 0..2 {
                for nu in 0..4 {
                    de[k][2 + a][nu] = -self.n[a][k].g[nu];
                }
            }
        }
        de
    }

    /// N-elongated derivative `e_alpha F` from a coordinate gradient.
    pub fn elongate(&self, alpha: usize, grad: &[f64; 4]) -> f64 {
        let e = self.frame();
        (0..4).map(|mu| e[alpha][mu] * grad[mu]).sum()
    }

    /// `[e_a, e_b] = w[c][a][b] e_c`.
    pub fn anholonomy(&self) -> Tensor3 {
        let e = self.frame();
        let de = self.frame_gradient();
        let d = self.coframe();
        let mut w = zero3();
        for a in 0..4 {
            for b in 0..4 {
                let mut bracket = [0.0; 4];
                for (mu, slot) in bracket.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for nu in 0..4 {
                        s += e[a][nu] * de[b][mu][nu] - e[b][nu] * de[a][mu][nu];
                    }
                    *slot = s;
                }
                for c in 0..4 {
                    w[c][a][b] = (0..4).map(|mu| d[c][mu] * bracket[mu]).sum();
                }
            }
        }
        w
    }

    /// `egrad[gamma][beta] = e_gamma G_beta` for the diagonal adapted metric.
    pub fn metric_elongated(&self) -> Mat4 {
        let mut out = [[0.0; 4]; 4];
        for (gamma, row) in out.iter_mut().enumerate() {
            for beta in 0..4 {
                row[beta] = self.elongate(gamma, &self.diag[beta].g);
            }
        }
        out
    }

    pub fn adapted_diag(&self) -> [f64; 4] {
        [self.diag[0].v, self.diag[1].v, self.diag[2].v, self.diag[3].v]
    }

    /// Partial `d_b N^a_k` for v-indices `a, b` in `{2, 3}`.
    fn dn_v(&self, a: usize, k: usize, b: usize) -> f64 {
        self.n[a - 2][k].g[b]
    }

    /// Canonical d-connection coefficients.
    pub fn canonical_gamma(&self) -> Tensor3 {
        let g = self.adapted_diag();
        let eg = self.metric_elongated();
        let mut gam = zero3();
        // h-block L^i_jk, diagonal h-metric
        for &i in &H_INDICES {
            for &j in &H_INDICES {
                for &k in &H_INDICES {
                    let mut s = 0.0;
                    if j == i {
                        s += eg[k][i];
                    }
                    if k == i {
                        s += eg[j][i];
                    }
                    if j == k {
                        s -= eg[i][j];
                    }
                    gam[i][j][k] = 0.5 * s / g[i];
                }
            }
        }
        // L^a_bk
        for &a in &V_INDICES {
            for &b in &V_INDICES {
                for &k in &H_INDICES {
                    let mut s = 0.0;
                    if b == a {
                        s += eg[k][a];
                    }
                    s -= g[a] * self.dn_v(a, k, b);
                    s -= g[b] * self.dn_v(b, k, a);
                    gam[a][b][k] = self.dn_v(a, k, b) + 0.5 * s / g[a];
                }
            }
        }
        // C^i_jc
        for &i in &H_INDICES {
            for &c in &V_INDICES {
                gam[i][i][c] = 0.5 * eg[c][i] / g[i];
            }
        }
        // C^a_bc in the symmetric Christoffel form
        for &a in &V_INDICES {
            for &b in &V_INDICES {
                for &c in &V_INDICES {
                    let mut s = 0.0;
                    if b == a {
                        s += eg[c][a];
                    }
                    if c == a {
                        s += eg[b][a];
                    }
                    if b == c {
                        s -= eg[a][b];
                    }
                    gam[a][b][c] = 0.5 * s / g[a];
                }
            }
        }
        gam
    }

    /// Levi-Civita coefficients in the N-adapted frame (Koszul formula with anholonomy).
    pub fn levi_civita_gamma(&self) -> Tensor3 {
        let g = self.adapted_diag();
        let eg = self.metric_elongated();
        let w = self.anholonomy();
        let mut gam = zero3();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    let mut s = g[a] * w[a][c][b] - g[b] * w[b][c][a] - g[c] * w[c][b][a];
                    if b == a {
                        s += eg[c][a];
                    }
                    if c == a {
                        s += eg[b][a];
                    }
                    if c == b {
                        s -= eg[a][c];
                    }
                    gam[a][b][c] = 0.5 * s / g[a];
                }
            }
        }
        gam
    }
}

fn check_coefficient(name: &str, value: f64, sign: i8, point: [f64; 4]) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{name} at {point:?}")));
    }
    if value.abs() < DEGENERACY_FLOOR {
        return Err(Error::Degenerate { name: name.to_string(), value, point });
    }
    if sign != 0 && value.signum() != sign as f64 {
        return Err(Error::SignatureMismatch { name: name.to_string(), value, point });
    }
    Ok(())
}

/// Metric components at a point in both bases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricComponents {
    pub coordinate: Mat4,
    pub adapted: Mat4,
}

pub fn eval_metric(spec: &MetricSpec, u: &ChartPoint) -> Result<MetricComponents> {
    let pd = PointData::eval(spec, u)?;
    let diag = pd.adapted_diag();
    let d = pd.coframe();
    let mut adapted = [[0.0; 4]; 4];
    let mut coordinate = [[0.0; 4]; 4];
    for a in 0..4 {
        adapted[a][a] = diag[a];
    }
    for mu in 0..4 {
        for nu in 0..4 {
            coordinate[mu][nu] = (0..4).map(|a| diag[a] * d[a][mu] * d[a][nu]).sum();
        }
    }
    Ok(MetricComponents { coordinate, adapted })
}

/// N-adapted frame and its dual.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameBasis {
    /// `e[alpha][mu]`: coordinate components of `e_alpha`.
    pub e: Mat4,
    /// `dual[mu][beta]`: coefficient of `du^mu` in `e^beta`, so `e . dual = I`.
    pub dual: Mat4,
}

pub fn n_adapted_frame(spec: &MetricSpec, u: &ChartPoint) -> Result<FrameBasis> {
    let pd = PointData::eval(spec, u)?;
    let e = pd.frame();
    let d = pd.coframe();
    let mut dual = [[0.0; 4]; 4];
    for mu in 0..4 {
        for beta in 0..4 {
            dual[mu][beta] = d[beta][mu];
        }
    }
    Ok(FrameBasis { e, dual })
}

/// Anholonomy data: `omega[a][i][j] = e_j N^a_i - e_i N^a_j` (a, i, j over 0..2)
/// and the full structure functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anholonomy {
    pub omega: [[[f64; 2]; 2]; 2],
    pub w: Tensor3,
}

pub fn anholonomy(spec: &MetricSpec, u: &ChartPoint) -> Result<Anholonomy> {
    let pd = PointData::eval(spec, u)?;
    Ok(anholonomy_from(&pd))
}

fn anholonomy_from(pd: &PointData) -> Anholonomy {
    let w = pd.anholonomy();
    let mut omega = [[[0.0; 2]; 2]; 2];
    for a in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                omega[a][i][j] = w[2 + a][i][j];
            }
        }
    }
    Anholonomy { omega, w }
}

/// Canonical d-connection at a point with its torsion and anholonomy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConnectionBlock {
    pub gamma: Tensor3,
    pub torsion: Tensor3,
    pub anholonomy: Tensor3,
    pub omega: [[[f64; 2]; 2]; 2],
}

impl ConnectionBlock {
    /// `L^i_{jk}` for h-indices in `0..2`.
    pub fn l_h(&self, i: usize, j: usize, k: usize) -> f64 {
        self.gamma[i][j][k]
    }
    /// `L^a_{bk}` with `a, b` in `0..2` counting v-indices and `k` an h-index.
    pub fn l_mixed(&self, a: usize, b: usize, k: usize) -> f64 {
        self.gamma[2 + a][2 + b][k]
    }
    /// `C^i_{jc}` with `c` in `0..2` counting v-indices.
    pub fn c_mixed(&self, i: usize, j: usize, c: usize) -> f64 {
        self.gamma[i][j][2 + c]
    }
    /// `C^a_{bc}`, all three counting v-indices.
    pub fn c_v(&self, a: usize, b: usize, c: usize) -> f64 {
        self.gamma[2 + a][2 + b][2 + c]
    }
}

fn torsion_of(gamma: &Tensor3, w: &Tensor3) -> Tensor3 {
    let mut t = zero3();
    for c in 0..4 {
        for a in 0..4 {
            for b in 0..4 {
                t[c][a][b] = gamma[c][a][b] - gamma[c][b][a] + w[c][a][b];
            }
        }
    }
    t
}

pub fn connection_at(pd: &PointData) -> ConnectionBlock {
    let gamma = pd.canonical_gamma();
    let an = anholonomy_from(pd);
    let torsion = torsion_of(&gamma, &an.w);
    ConnectionBlock { gamma, torsion, anholonomy: an.w, omega: an.omega }
}

pub fn canonical_dconnection(spec: &MetricSpec, u: &ChartPoint) -> Result<ConnectionBlock> {
    Ok(connection_at(&PointData::eval(spec, u)?))
}

pub fn torsion(spec: &MetricSpec, u: &ChartPoint) -> Result<Tensor3> {
    Ok(canonical_dconnection(spec, u)?.torsion)
}

/// Distortion `Z = Gamma_LC - Gamma_canonical`, both in the N-adapted frame.
pub fn distortion(spec: &MetricSpec, u: &ChartPoint) -> Result<Tensor3> {
    let pd = PointData::eval(spec, u)?;
    let lc = pd.levi_civita_gamma();
    let can = pd.canonical_gamma();
    let mut z = zero3();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                z[a][b][c] = lc[a][b][c] - can[a][b][c];
            }
        }
    }
    Ok(z)
}

pub fn levi_civita(spec: &MetricSpec, u: &ChartPoint) -> Result<Tensor3> {
    Ok(PointData::eval(spec, u)?.levi_civita_gamma())
}

/// Covariant derivative of the adapted metric under the canonical d-connection,
/// `out[c][a][b] = (D_{e_c} g)(e_a, e_b)`.
pub fn metric_covariant_derivative(spec: &MetricSpec, u: &ChartPoint) -> Result<Tensor3> {
    let pd = PointData::eval(spec, u)?;
    let g = pd.adapted_diag();
    let eg = pd.metric_elongated();
    let gam = pd.canonical_gamma();
    let mut out = zero3();
    for c in 0..4 {
        for a in 0..4 {
            for b in 0..4 {
                let mut s = if a == b { eg[c][a] } else { 0.0 };
                s -= gam[b][a][c] * g[b] + gam[a][b][c] * g[a];
                out[c][a][b] = s;
            }
        }
    }
    Ok(out)
}

/// Second N-elongated derivatives `e_a e_b f` as nested first derivatives,
/// together with `e_a f`.
pub fn elongated_second(pd: &PointData, fj: &Jet) -> ([f64; 4], Mat4) {
    let e = pd.frame();
    let de = pd.frame_gradient();
    let mut first = [0.0; 4];
    for (a, slot) in first.iter_mut().enumerate() {
        *slot = (0..4).map(|mu| e[a][mu] * fj.g[mu]).sum();
    }
    let mut second = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            let mut s = 0.0;
            for mu in 0..4 {
                for nu in 0..4 {
                    s += e[a][mu] * (de[b][nu][mu] * fj.g[nu] + e[b][nu] * fj.h[mu][nu]);
                }
            }
            second[a][b] = s;
        }
    }
    (first, second)
}

/// Laplace-Beltrami d-operator of the canonical d-connection applied to `f`:
/// `1/2 g^ab [e_a e_b f + e_b e_a f - (G^n_ab + G^n_ba) e_n f]`.
pub fn laplace_beltrami_apply(spec: &MetricSpec, f: &dyn ScalarField, u: &ChartPoint) -> Result<f64> {
    let pd = PointData::eval(spec, u)?;
    let fj = field_jet(f, &pd.u, spec.mode).map_err(|e| jet_error("f", e))?;
    Ok(laplace_beltrami_at(&pd, &fj))
}

pub fn laplace_beltrami_at(pd: &PointData, fj: &Jet) -> f64 {
    let g = pd.adapted_diag();
    let gam = pd.canonical_gamma();
    let (first, second) = elongated_second(pd, fj);
    let mut total = 0.0;
    for a in 0..4 {
        let mut s = second[a][a];
        for nu in 0..4 {
            s -= gam[nu][a][a] * first[nu];
        }
        total += s / g[a];
    }
    total
}

/// Metric built from base coefficients and multiplicative polarizations.
#[derive(Clone)]
pub struct PolarizedMetricSpec {
    pub base: MetricSpec,
    /// Polarizations of `g_1, g_2, h_3, h_4`.
    pub eta: [Field; 4],
    /// Polarizations of `N^a_i`, same layout as [`MetricSpec::n`].
    pub eta_n: [[Field; 2]; 2],
}

struct ProductField(Field, Field);

impl ScalarField for ProductField {
    fn value(&self, u: &[f64; 4]) -> f64 {
        self.0.value(u) * self.1.value(u)
    }
    fn jet(&self, u: &[f64; 4]) -> Option<Jet> {
        Some(self.0.jet(u)? * self.1.jet(u)?)
    }
}

fn product(a: &Field, b: &Field) -> Field {
    Arc::new(ProductField(a.clone(), b.clone()))
}

impl PolarizedMetricSpec {
    pub fn identity(base: MetricSpec) -> Self {
        let one = constant(1.0);
        PolarizedMetricSpec {
            base,
            eta: [one.clone(), one.clone(), one.clone(), one.clone()],
            eta_n: [[one.clone(), one.clone()], [one.clone(), one]],
        }
    }

    /// Target metric with coefficients `eta * base`.
    pub fn resolve(&self) -> MetricSpec {
        let b = &self.base;
        MetricSpec {
            g: [product(&self.eta[0], &b.g[0]), product(&self.eta[1], &b.g[1])],
            h: [product(&self.eta[2], &b.h[0]), product(&self.eta[3], &b.h[1])],
            n: [
                [product(&self.eta_n[0][0], &b.n[0][0]), product(&self.eta_n[0][1], &b.n[0][1])],
                [product(&self.eta_n[1][0], &b.n[1][0]), product(&self.eta_n[1][1], &b.n[1][1])],
            ],
            signature: b.signature,
            mode: b.mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{jet_fn, value_fn};
    use proptest::prelude::*;

    fn pt(u: [f64; 4]) -> ChartPoint {
        ChartPoint::from_coords(u).unwrap()
    }

    /// Christoffel symbols of a 4x4 coordinate metric by central differences;
    /// `out[a][b][c] = Gamma^a_{bc}` with `c` the differentiation direction.
    fn christoffel_fd(metric: &dyn Fn(&[f64; 4]) -> Mat4, u: &[f64; 4]) -> Tensor3 {
        let h = 1e-5;
        let mut dg = [[[0.0; 4]; 4]; 4]; // dg[k][m][n] = d_k g_mn
        for k in 0..4 {
            let mut p = *u;
            let mut m = *u;
            p[k] += h;
            m[k] -= h;
            let gp = metric(&p);
            let gm = metric(&m);
            for a in 0..4 {
                for b in 0..4 {
                    dg[k][a][b] = (gp[a][b] - gm[a][b]) / (2.0 * h);
                }
            }
        }
        let inv = invert4(&metric(u));
        let mut out = zero3();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    out[a][b][c] = (0..4)
                        .map(|d| 0.5 * inv[a][d] * (dg[c][b][d] + dg[b][c][d] - dg[d][b][c]))
                        .sum();
                }
            }
        }
        out
    }

    fn invert4(m: &Mat4) -> Mat4 {
        let mut a = *m;
        let mut inv = identity4();
        for col in 0..4 {
            let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            inv.swap(col, piv);
            let p = a[col][col];
            for k in 0..4 {
                a[col][k] /= p;
                inv[col][k] /= p;
            }
            for r in 0..4 {
                if r != col {
                    let f = a[r][col];
                    for k in 0..4 {
                        a[r][k] -= f * a[col][k];
                        inv[r][k] -= f * inv[col][k];
                    }
                }
            }
        }
        inv
    }

    fn sphere_spec() -> MetricSpec {
        MetricSpec::diagonal(
            [constant(1.0), jet_fn(|u| u[0].sin().powi(2))],
            [constant(-1.0), constant(1.0)],
        )
    }

    fn smooth_spec(seed: u64) -> MetricSpec {
        let c = |k: u64| ((seed * 7919 + k * 104729) % 1000) as f64 / 1000.0 - 0.5;
        let (a0, a1, a2, a3, a4, a5) = (c(1), c(2), c(3), c(4), c(5), c(6));
        MetricSpec {
            g: [
                jet_fn(move |u| 1.5 + 0.3 * (u[0] * a0 + u[2] * a1).sin() + 0.2 * u[1] * u[3] * a2),
                jet_fn(move |u| 1.2 + 0.25 * (u[1] * a3 - u[2]).cos() * (0.5 + a4)),
            ],
            h: [
                jet_fn(move |u| -(1.3 + 0.2 * (u[0] + a5 * u[2] + u[3]).sin())),
                jet_fn(move |u| 1.1 + 0.3 * (a0 * u[0] * u[2]).exp() * (0.4 + a1 * u[1])),
            ],
            n: [
                [
                    jet_fn(move |u| 0.3 * (u[1] * a2 + u[2]).sin() + 0.1 * u[3]),
                    jet_fn(move |u| 0.2 * u[0] * u[2] * a3 + 0.1 * (u[3] - u[0]).cos()),
                ],
                [
                    jet_fn(move |u| 0.25 * (a4 * u[0] + u[2] * u[3]).cos()),
                    jet_fn(move |u| 0.15 * u[1] * u[1] * a5 + 0.2 * (u[2] + a2 * u[3]).sin()),
                ],
            ],
            signature: [1, 1, -1, 1],
            mode: DerivativeMode::Analytic,
        }
    }

    fn coordinate_metric(spec: &MetricSpec) -> impl Fn(&[f64; 4]) -> Mat4 + '_ {
        move |u: &[f64; 4]| {
            let diag = [
                spec.g[0].value(u),
                spec.g[1].value(u),
                spec.h[0].value(u),
                spec.h[1].value(u),
            ];
            let mut g = [[0.0; 4]; 4];
            // direct quadratic form: g(v, v) = sum g_i (v^i)^2 + sum h_a (v^a + N^a_i v^i)^2
            for mu in 0..4 {
                for nu in 0..4 {
                    let form = |v: &[f64; 4]| {
                        let mut q = diag[0] * v[0] * v[0] + diag[1] * v[1] * v[1];
                        for a in 0..2 {
                            let s = v[2 + a] + spec.n[a][0].value(u) * v[0] + spec.n[a][1].value(u) * v[1];
                            q += diag[2 + a] * s * s;
                        }
                        q
                    };
                    let mut ep = [0.0; 4];
                    ep[mu] += 1.0;
                    ep[nu] += 1.0;
                    let mut em = [0.0; 4];
                    em[mu] += 1.0;
                    em[nu] -= 1.0;
                    g[mu][nu] = 0.25 * (form(&ep) - form(&em));
                }
            }
            g
        }
    }

    /// Coordinate Levi-Civita connection carried into the N-adapted frame.
    fn lc_frame_oracle(spec: &MetricSpec, u: &[f64; 4]) -> Tensor3 {
        let metric = coordinate_metric(spec);
        let chr = christoffel_fd(&metric, u);
        let frame_at = |p: &[f64; 4]| {
            let mut e = identity4();
            for a in 0..2 {
                for k in 0..2 {
                    e[k][2 + a] = -spec.n[a][k].value(p);
                }
            }
            e
        };
        let e = frame_at(u);
        let d = invert4(&e); // columns are coframe rows: d[mu][alpha]
        let h = 1e-6;
        let mut de = [[[0.0; 4]; 4]; 4]; // de[nu][beta][mu]
        for nu in 0..4 {
            let mut p = *u;
            let mut m = *u;
            p[nu] += h;
            m[nu] -= h;
            let (ep, em) = (frame_at(&p), frame_at(&m));
            for b in 0..4 {
                for mu in 0..4 {
                    de[nu][b][mu] = (ep[b][mu] - em[b][mu]) / (2.0 * h);
                }
            }
        }
        let mut out = zero3();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    let mut s = 0.0;
                    for mu in 0..4 {
                        let mut v = 0.0;
                        for nu in 0..4 {
                            v += e[c][nu] * de[nu][b][mu];
                            for l in 0..4 {
                                v += e[c][nu] * e[b][l] * chr[mu][l][nu];
                            }
                        }
                        s += d[mu][a] * v;
                    }
                    out[a][b][c] = s;
                }
            }
        }
        out
    }

    #[test]
    fn flat_metric_is_the_same_in_both_bases() {
        let m = eval_metric(&MetricSpec::flat(), &pt([0.3, 1.0, -2.0, 5.0])).unwrap();
        let expect = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        assert_eq!(m.coordinate, expect);
        assert_eq!(m.adapted, expect);
    }

    #[test]
    fn off_diagonal_expansion_matches_quadratic_form() {
        let c = 0.7;
        let spec = MetricSpec::flat().with_n(2, 0, constant(c));
        let m = eval_metric(&spec, &pt([0.1, 0.2, 0.3, 0.4])).unwrap();
        assert!((m.coordinate[0][0] - (1.0 - c * c)).abs() < 1e-15);
        assert!((m.coordinate[0][2] + c).abs() < 1e-15);
        assert!((m.coordinate[2][0] + c).abs() < 1e-15);
        let oracle = coordinate_metric(&spec)(&[0.1, 0.2, 0.3, 0.4]);
        for a in 0..4 {
            for b in 0..4 {
                assert!((m.coordinate[a][b] - oracle[a][b]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn unit_polarization_is_identity() {
        let base = smooth_spec(3);
        let pol = PolarizedMetricSpec::identity(base.clone()).resolve();
        let u = pt([0.2, 0.4, 0.6, 0.8]);
        assert_eq!(eval_metric(&base, &u).unwrap(), eval_metric(&pol, &u).unwrap());
    }

    #[test]
    fn polarization_scales_coefficients() {
        let mut p = PolarizedMetricSpec::identity(MetricSpec::flat());
        p.eta[0] = jet_fn(|u| 2.0 + u[2]);
        let m = eval_metric(&p.resolve(), &pt([0.0, 0.0, 0.5, 0.0])).unwrap();
        assert!((m.adapted[0][0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn frame_rows_and_duality() {
        let spec = MetricSpec::flat().with_n(2, 0, constant(0.3));
        let f = n_adapted_frame(&spec, &pt([0.0; 4])).unwrap();
        assert_eq!(f.e[0], [1.0, 0.0, -0.3, 0.0]);
        let flat = n_adapted_frame(&MetricSpec::flat(), &pt([1.0; 4])).unwrap();
        assert_eq!(flat.e, identity4());
        assert_eq!(flat.dual, identity4());
    }

    #[test]
    fn anholonomy_examples() {
        let spec = MetricSpec::flat().with_n(2, 0, jet_fn(|u| u[1]));
        let an = anholonomy(&spec, &pt([0.3, 0.7, 0.1, 0.2])).unwrap();
        assert!((an.omega[0][0][1] - 1.0).abs() < 1e-15);
        assert!((an.omega[0][1][0] + 1.0).abs() < 1e-15);
        let spec = MetricSpec::flat().with_n(2, 0, jet_fn(|u| u[2]));
        let an = anholonomy(&spec, &pt([0.3, 0.7, 0.1, 0.2])).unwrap();
        // [e_1, e_3] = (d_3 N^3_1) e_3
        assert!((an.w[2][0][2] - 1.0).abs() < 1e-15);
        assert!((an.w[2][2][0] + 1.0).abs() < 1e-15);
        let constant_n = MetricSpec::flat().with_n(3, 1, constant(2.0));
        assert_eq!(max_abs3(&anholonomy(&constant_n, &pt([0.1; 4])).unwrap().w), 0.0);
    }

    #[test]
    fn flat_connection_vanishes() {
        let c = canonical_dconnection(&MetricSpec::flat(), &pt([0.5, -0.5, 2.0, 1.0])).unwrap();
        assert_eq!(max_abs3(&c.gamma), 0.0);
        assert_eq!(max_abs3(&c.torsion), 0.0);
        assert_eq!(max_abs3(&distortion(&MetricSpec::flat(), &pt([0.5; 4])).unwrap()), 0.0);
    }

    #[test]
    fn sphere_h_block() {
        let x = 0.8;
        let c = canonical_dconnection(&sphere_spec(), &pt([x, 0.3, 0.0, 0.0])).unwrap();
        assert!((c.l_h(0, 1, 1) + x.sin() * x.cos()).abs() < 1e-14);
        assert!((c.l_h(1, 0, 1) - x.cos() / x.sin()).abs() < 1e-14);
        assert!((c.l_h(1, 1, 0) - x.cos() / x.sin()).abs() < 1e-14);
    }

    #[test]
    fn diagonal_blocks_match_christoffel_oracle() {
        for seed in 0..5u64 {
            let mut spec = smooth_spec(seed);
            let zero = constant(0.0);
            spec.n = [[zero.clone(), zero.clone()], [zero.clone(), zero]];
            let u = [0.3 + 0.1 * seed as f64, 0.5, 0.2, 0.7];
            let c = canonical_dconnection(&spec, &pt(u)).unwrap();
            let oracle = christoffel_fd(&coordinate_metric(&spec), &u);
            for blk in [H_INDICES, V_INDICES] {
                for &a in &blk {
                    for &b in &blk {
                        for &cc in &blk {
                            assert!((c.gamma[a][b][cc] - oracle[a][b][cc]).abs() < 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn torsion_examples() {
        let spec = MetricSpec::flat().with_n(2, 0, jet_fn(|u| u[1]));
        let c = canonical_dconnection(&spec, &pt([0.1, 0.2, 0.3, 0.4])).unwrap();
        assert!((c.torsion[2][0][1] - c.omega[0][0][1]).abs() < 1e-15);
        assert!(c.torsion[2][0][1].abs() > 0.5);
        let spec = smooth_spec(4);
        let c = canonical_dconnection(&spec, &pt([0.1, 0.2, 0.3, 0.4])).unwrap();
        for &i in &H_INDICES {
            for &j in &H_INDICES {
                for &a in &V_INDICES {
                    assert_eq!(c.torsion[i][j][a], c.gamma[i][j][a]);
                }
                for &k in &H_INDICES {
                    assert_eq!(c.torsion[i][j][k], c.gamma[i][j][k] - c.gamma[i][k][j]);
                    assert!(c.torsion[i][j][k].abs() < 1e-15);
                }
            }
        }
        for &a in &V_INDICES {
            for &b in &V_INDICES {
                for &cc in &V_INDICES {
                    assert!(c.torsion[a][b][cc].abs() < 1e-15);
                }
            }
        }
        // T^c_{aj} = L^c_{aj} - e_a N^c_j
        let pd = PointData::eval(&spec, &pt([0.1, 0.2, 0.3, 0.4])).unwrap();
        for &cc in &V_INDICES {
            for &a in &V_INDICES {
                for &j in &H_INDICES {
                    let expect = c.gamma[cc][a][j] - pd.n[cc - 2][j].g[a];
                    assert!((c.torsion[cc][a][j] - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn distortion_restores_levi_civita() {
        for seed in 0..4u64 {
            let spec = smooth_spec(seed);
            let u = [0.2 + 0.15 * seed as f64, 0.6, 0.4, 0.3];
            let can = canonical_dconnection(&spec, &pt(u)).unwrap();
            let z = distortion(&spec, &pt(u)).unwrap();
            let oracle = lc_frame_oracle(&spec, &u);
            for a in 0..4 {
                for b in 0..4 {
                    for c in 0..4 {
                        let got = can.gamma[a][b][c] + z[a][b][c];
                        assert!((got - oracle[a][b][c]).abs() < 1e-5, "{a}{b}{c}: {got} vs {}", oracle[a][b][c]);
                    }
                }
            }
        }
    }

    #[test]
    fn split_dependence_has_no_distortion() {
        // g on x only, h on v only, N = 0
        let spec = MetricSpec::diagonal(
            [jet_fn(|u| 1.0 + u[0] * u[0]), jet_fn(|u| 2.0 + u[1].sin())],
            [constant(-1.0), jet_fn(|u| 1.0 + 0.5 * u[2] * u[2])],
        );
        let u = pt([0.3, 0.2, 0.9, 0.1]);
        assert!(max_abs3(&distortion(&spec, &u).unwrap()) < 1e-15);
        assert!(max_abs3(&torsion(&spec, &u).unwrap()) < 1e-15);
        // an x-dependent h_4 leaves mixed torsion T^4_{4i} = e_i h_4 / (2 h_4)
        let mixed = MetricSpec::diagonal(
            [constant(1.0), constant(1.0)],
            [constant(-1.0), jet_fn(|u| 1.0 + 0.5 * u[0])],
        );
        let t = torsion(&mixed, &u).unwrap();
        assert!((t[3][3][0] - 0.25 / 1.15).abs() < 1e-15);
        assert!(max_abs3(&distortion(&mixed, &u).unwrap()) > 0.1);
    }

    #[test]
    fn levi_civita_is_torsion_free_and_metric() {
        let spec = smooth_spec(9);
        let pd = PointData::eval(&spec, &pt([0.3, 0.1, 0.5, 0.2])).unwrap();
        let lc = pd.levi_civita_gamma();
        let w = pd.anholonomy();
        assert!(max_abs3(&torsion_of(&lc, &w)) < 1e-13);
    }

    #[test]
    fn laplace_beltrami_examples() {
        let flat = MetricSpec::flat();
        let u = pt([0.4, 1.1, 0.0, 0.0]);
        let lin = jet_fn(|v| v[0]);
        assert_eq!(laplace_beltrami_apply(&flat, lin.as_ref(), &u).unwrap(), 0.0);
        let sq = jet_fn(|v| v[0] * v[0]);
        assert!((laplace_beltrami_apply(&flat, sq.as_ref(), &u).unwrap() - 2.0).abs() < 1e-14);
        let s = jet_fn(|v| v[0].sin() * v[1].sin());
        let expect = -2.0 * 0.4f64.sin() * 1.1f64.sin();
        assert!((laplace_beltrami_apply(&flat, s.as_ref(), &u).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn laplace_beltrami_on_sphere_block() {
        // f = cos(theta): Laplacian on the unit sphere is -2 cos(theta)
        let f = jet_fn(|v| v[0].cos());
        let x = 0.9;
        let got = laplace_beltrami_apply(&sphere_spec(), f.as_ref(), &pt([x, 0.2, 0.0, 0.0])).unwrap();
        assert!((got + 2.0 * x.cos()).abs() < 1e-13);
    }

    #[test]
    fn analytic_and_fd_modes_agree() {
        let spec = smooth_spec(2);
        let fd = spec.clone().with_mode(DerivativeMode::FiniteDifference);
        let u = pt([0.3, 0.5, 0.7, 0.1]);
        let a = canonical_dconnection(&spec, &u).unwrap();
        let b = canonical_dconnection(&fd, &u).unwrap();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    assert!((a.gamma[x][y][z] - b.gamma[x][y][z]).abs() < 1e-6);
                }
            }
        }
        let cross = spec.clone().with_mode(DerivativeMode::CrossCheck);
        assert!(canonical_dconnection(&cross, &u).is_ok());
    }

    #[test]
    fn degenerate_and_signature_errors() {
        let spec = MetricSpec::diagonal([constant(1.0), constant(1e-16)], [constant(-1.0), constant(1.0)]);
        assert!(matches!(eval_metric(&spec, &pt([0.0; 4])), Err(Error::Degenerate { .. })));
        let spec = MetricSpec::diagonal([constant(1.0), constant(1.0)], [constant(1.0), constant(1.0)]);
        assert!(matches!(eval_metric(&spec, &pt([0.0; 4])), Err(Error::SignatureMismatch { .. })));
        assert!(eval_metric(&spec.with_signature([1, 1, 1, 1]), &pt([0.0; 4])).is_ok());
        let no_jet = MetricSpec::diagonal([value_fn(|_| 1.0), constant(1.0)], [constant(-1.0), constant(1.0)]);
        assert!(matches!(canonical_dconnection(&no_jet, &pt([0.0; 4])), Err(Error::MissingAnalytic(_))));
        assert!(ChartPoint::from_coords([f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn frame_duality_for_random_n(n in proptest::array::uniform4(-3.0f64..3.0)) {
            let spec = MetricSpec::flat()
                .with_n(2, 0, constant(n[0]))
                .with_n(2, 1, constant(n[1]))
                .with_n(3, 0, constant(n[2]))
                .with_n(3, 1, constant(n[3]));
            let f = n_adapted_frame(&spec, &pt([0.0; 4])).unwrap();
            for a in 0..4 {
                for b in 0..4 {
                    let s: f64 = (0..4).map(|k| f.e[a][k] * f.dual[k][b]).sum();
                    let expect = if a == b { 1.0 } else { 0.0 };
                    prop_assert!((s - expect).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn canonical_connection_is_metric_compatible(
            seed in 0u64..500,
            u in proptest::array::uniform4(0.0f64..1.0),
        ) {
            let spec = smooth_spec(seed);
            let dg = metric_covariant_derivative(&spec, &pt(u)).unwrap();
            prop_assert!(max_abs3(&dg) < 1e-12);
            let fd = metric_covariant_derivative(&spec.with_mode(DerivativeMode::FiniteDifference), &pt(u)).unwrap();
            prop_assert!(max_abs3(&fd) < 1e-8);
        }

        #[test]
        fn torsion_is_antisymmetric(seed in 0u64..500, u in proptest::array::uniform4(0.0f64..1.0)) {
            let t = torsion(&smooth_spec(seed), &pt(u)).unwrap();
            for c in 0..4 {
                for a in 0..4 {
                    for b in 0..4 {
                        prop_assert_eq!(t[c][a][b], -t[c][b][a]);
                    }
                }
            }
        }
    }
}
