//! Scalar coefficient fields over the four chart coordinates `(x1, x2, y3, y4)`.
//!
//! Fields may carry an analytic second-order jet (value, gradient, Hessian).
//! The [`Jet`] type doubles as a forward-mode automatic differentiation
//! number, so closures written over `[Jet; 4]` get exact partials for free.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

/// Value, gradient and Hessian of a scalar at a chart point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: [f64; 4],
    pub h: [[f64; 4]; 4],
}

impl Jet {
    pub fn constant(v: f64) -> Self {
        Jet { v, g: [0.0; 4], h: [[0.0; 4]; 4] }
    }

    /// Independent variable `u[index]` with value `x`.
    pub fn var(index: usize, x: f64) -> Self {
        let mut j = Jet::constant(x);
        j.g[index] = 1.0;
        j
    }

    pub fn vars(u: &[f64; 4]) -> [Jet; 4] {
        [Jet::var(0, u[0]), Jet::var(1, u[1]), Jet::var(2, u[2]), Jet::var(3, u[3])]
    }

    /// Composition `f(self)` given `f`, `f'` and `f''` at `self.v`.
    pub fn chain(self, f: f64, d1: f64, d2: f64) -> Self {
        let mut out = Jet::constant(f);
        for i in 0..4 {
            out.g[i] = d1 * self.g[i];
            for j in 0..4 {
                out.h[i][j] = d1 * self.h[i][j] + d2 * self.g[i] * self.g[j];
            }
        }
        out
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn ln(self) -> Self {
        let x = self.v;
        self.chain(x.ln(), 1.0 / x, -1.0 / (x * x))
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }

    pub fn powi(self, n: i32) -> Self {
        let x = self.v;
        let nf = n as f64;
        let d1 = if n == 0 { 0.0 } else { nf * x.powi(n - 1) };
        let d2 = if n == 0 || n == 1 { 0.0 } else { nf * (nf - 1.0) * x.powi(n - 2) };
        self.chain(x.powi(n), d1, d2)
    }

    pub fn powf(self, p: f64) -> Self {
        let x = self.v;
        self.chain(x.powf(p), p * x.powf(p - 1.0), p * (p - 1.0) * x.powf(p - 2.0))
    }

    pub fn abs(self) -> Self {
        if self.v < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn recip(self) -> Self {
        let x = self.v;
        self.chain(1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x))
    }

    pub fn scale(mut self, c: f64) -> Self {
        self.v *= c;
        for i in 0..4 {
            self.g[i] *= c;
            for j in 0..4 {
                self.h[i][j] *= c;
            }
        }
        self
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, o: Jet) -> Jet {
        self.v += o.v;
        for i in 0..4 {
            self.g[i] += o.g[i];
            for j in 0..4 {
                self.h[i][j] += o.h[i][j];
            }
        }
        self
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let mut out = Jet::constant(self.v * o.v);
        for i in 0..4 {
            out.g[i] = self.v * o.g[i] + o.v * self.g[i];
            for j in 0..4 {
                out.h[i][j] = self.v * o.h[i][j]
                    + o.v * self.h[i][j]
                    + self.g[i] * o.g[j]
                    + o.g[i] * self.g[j];
            }
        }
        out
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, o: Jet) -> Jet {
        self * o.recip()
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, c: f64) -> Jet {
        self.v += c;
        self
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, c: f64) -> Jet {
        self.v -= c;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, c: f64) -> Jet {
        self.scale(c)
    }
}

impl Div<f64> for Jet {
    type Output = Jet;
    fn div(self, c: f64) -> Jet {
        self.scale(1.0 / c)
    }
}

impl Add<Jet> for f64 {
    type Output = Jet;
    fn add(self, j: Jet) -> Jet {
        j + self
    }
}

impl Sub<Jet> for f64 {
    type Output = Jet;
    fn sub(self, j: Jet) -> Jet {
        (-j) + self
    }
}

impl Mul<Jet> for f64 {
    type Output = Jet;
    fn mul(self, j: Jet) -> Jet {
        j.scale(self)
    }
}

impl Div<Jet> for f64 {
    type Output = Jet;
    fn div(self, j: Jet) -> Jet {
        j.recip().scale(self)
    }
}

/// A scalar function of the chart coordinates.
pub trait ScalarField: Send + Sync {
    fn value(&self, u: &[f64; 4]) -> f64;

    /// Analytic jet, when the field can supply one.
    fn jet(&self, _u: &[f64; 4]) -> Option<Jet> {
        None
    }
}

pub type Field = Arc<dyn ScalarField>;

impl ScalarField for f64 {
    fn value(&self, _u: &[f64; 4]) -> f64 {
        *self
    }
    fn jet(&self, _u: &[f64; 4]) -> Option<Jet> {
        Some(Jet::constant(*self))
    }
}

pub fn constant(c: f64) -> Field {
    Arc::new(c)
}

/// Closure over jet-valued coordinates; partials come from [`Jet`] arithmetic.
pub struct JetFn<F>(pub F);

impl<F> ScalarField for JetFn<F>
where
    F: Fn(&[Jet; 4]) -> Jet + Send + Sync,
{
    fn value(&self, u: &[f64; 4]) -> f64 {
        (self.0)(&Jet::vars(u)).v
    }
    fn jet(&self, u: &[f64; 4]) -> Option<Jet> {
        Some((self.0)(&Jet::vars(u)))
    }
}

pub fn jet_fn<F>(f: F) -> Field
where
    F: Fn(&[Jet; 4]) -> Jet + Send + Sync + 'static,
{
    Arc::new(JetFn(f))
}

/// Value-only closure; derivatives must come from finite differences.
pub struct ValueFn<F>(pub F);

impl<F> ScalarField for ValueFn<F>
where
    F: Fn(&[f64; 4]) -> f64 + Send + Sync,
{
    fn value(&self, u: &[f64; 4]) -> f64 {
        (self.0)(u)
    }
}

pub fn value_fn<F>(f: F) -> Field
where
    F: Fn(&[f64; 4]) -> f64 + Send + Sync + 'static,
{
    Arc::new(ValueFn(f))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TrigKind {
    Sin,
    Cos,
}

/// Built-in coefficient families, loadable from configuration files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Expr {
    Const {
        value: f64,
    },
    /// `sum_k coef_k * prod_i u_i^{p_ki}`
    Poly {
        terms: Vec<Monomial>,
    },
    /// `amp * trig(freq . u + phase)`
    Trig {
        amp: f64,
        freq: [f64; 4],
        #[serde(default)]
        phase: f64,
        func: TrigKind,
    },
    /// `amp * exp(rate . u)`
    Exp {
        amp: f64,
        rate: [f64; 4],
    },
    /// Bilinear interpolation of tabulated values over two chart axes.
    Tabulated {
        axes: [usize; 2],
        origin: [f64; 2],
        spacing: [f64; 2],
        shape: [usize; 2],
        values: Vec<f64>,
    },
    Sum {
        #[serde(deserialize_with = "expr_list")]
        terms: Vec<Expr>,
    },
    Product {
        #[serde(deserialize_with = "expr_list")]
        factors: Vec<Expr>,
    },
}

/// Sub-expressions, where a bare number stands for a constant.
fn expr_list<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<Expr>, D::Error> {
    use serde::de::Error as _;
    Vec::<serde_json::Value>::deserialize(d)?
        .into_iter()
        .map(|v| match v.as_f64() {
            Some(c) => Ok(Expr::constant(c)),
            None => serde_json::from_value(v).map_err(D::Error::custom),
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coef: f64,
    pub powers: [u32; 4],
}

impl Expr {
    pub fn constant(value: f64) -> Self {
        Expr::Const { value }
    }

    pub fn eval_jet(&self, u: &[f64; 4]) -> Jet {
        match self {
            Expr::Const { value } => Jet::constant(*value),
            Expr::Poly { terms } => {
                let vars = Jet::vars(u);
                let mut acc = Jet::constant(0.0);
                for t in terms {
                    let mut m = Jet::constant(t.coef);
                    for (i, &p) in t.powers.iter().enumerate() {
                        if p > 0 {
                            m = m * vars[i].powi(p as i32);
                        }
                    }
                    acc = acc + m;
                }
                acc
            }
            Expr::Trig { amp, freq, phase, func } => {
                let arg = linear_jet(freq, u) + *phase;
                let t = match func {
                    TrigKind::Sin => arg.sin(),
                    TrigKind::Cos => arg.cos(),
                };
                t.scale(*amp)
            }
            Expr::Exp { amp, rate } => linear_jet(rate, u).exp().scale(*amp),
            Expr::Tabulated { axes, origin, spacing, shape, values } => {
                tabulated_jet(axes, origin, spacing, shape, values, u)
            }
            Expr::Sum { terms } => terms
                .iter()
                .fold(Jet::constant(0.0), |acc, t| acc + t.eval_jet(u)),
            Expr::Product { factors } => factors
                .iter()
                .fold(Jet::constant(1.0), |acc, t| acc * t.eval_jet(u)),
        }
    }

    /// Structural checks that do not need a chart point.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Expr::Tabulated { axes, spacing, shape, values, .. } => {
                if axes[0] > 3 || axes[1] > 3 || axes[0] == axes[1] {
                    return Err("tabulated axes must be two distinct indices in 0..4".into());
                }
                if shape[0] < 2 || shape[1] < 2 {
                    return Err("tabulated shape must be at least 2x2".into());
                }
                if !(spacing[0] > 0.0 && spacing[1] > 0.0) {
                    return Err("tabulated spacing must be positive".into());
                }
                if values.len() != shape[0] * shape[1] {
                    return Err(format!(
                        "tabulated values has {} entries, shape needs {}",
                        values.len(),
                        shape[0] * shape[1]
                    ));
                }
                Ok(())
            }
            Expr::Sum { terms } => terms.iter().try_for_each(Expr::validate),
            Expr::Product { factors } => factors.iter().try_for_each(Expr::validate),
            _ => Ok(()),
        }
    }

    pub fn into_field(self) -> Field {
        Arc::new(self)
    }
}

fn linear_jet(k: &[f64; 4], u: &[f64; 4]) -> Jet {
    let mut j = Jet::constant(k.iter().zip(u).map(|(a, b)| a * b).sum());
    j.g = *k;
    j
}

fn tabulated_jet(
    axes: &[usize; 2],
    origin: &[f64; 2],
    spacing: &[f64; 2],
    shape: &[usize; 2],
    values: &[f64],
    u: &[f64; 4],
) -> Jet {
    // clamp to the table, extrapolating linearly from the edge cell
    let mut idx = [0usize; 2];
    let mut frac = [0.0; 2];
    for d in 0..2 {
        let s = (u[axes[d]] - origin[d]) / spacing[d];
        let cell = s.floor().clamp(0.0, (shape[d] - 2) as f64);
        idx[d] = cell as usize;
        frac[d] = s - cell;
    }
    let at = |i: usize, j: usize| values[i * shape[1] + j];
    let (i, j) = (idx[0], idx[1]);
    let (a, b) = (frac[0], frac[1]);
    let f00 = at(i, j);
    let f10 = at(i + 1, j);
    let f01 = at(i, j + 1);
    let f11 = at(i + 1, j + 1);
    let mut out = Jet::constant(
        f00 * (1.0 - a) * (1.0 - b) + f10 * a * (1.0 - b) + f01 * (1.0 - a) * b + f11 * a * b,
    );
    let da = ((f10 - f00) * (1.0 - b) + (f11 - f01) * b) / spacing[0];
    let db = ((f01 - f00) * (1.0 - a) + (f11 - f10) * a) / spacing[1];
    let dab = (f00 - f10 - f01 + f11) / (spacing[0] * spacing[1]);
    out.g[axes[0]] = da;
    out.g[axes[1]] = db;
    out.h[axes[0]][axes[1]] = dab;
    out.h[axes[1]][axes[0]] = dab;
    out
}

impl ScalarField for Expr {
    fn value(&self, u: &[f64; 4]) -> f64 {
        match self {
            Expr::Const { value } => *value,
            Expr::Trig { amp, freq, phase, func } => {
                let arg = freq.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() + phase;
                amp * match func {
                    TrigKind::Sin => arg.sin(),
                    TrigKind::Cos => arg.cos(),
                }
            }
            Expr::Exp { amp, rate } => amp * rate.iter().zip(u).map(|(a, b)| a * b).sum::<f64>().exp(),
            Expr::Sum { terms } => terms.iter().map(|t| t.value(u)).sum(),
            Expr::Product { factors } => factors.iter().map(|t| t.value(u)).product(),
            _ => self.eval_jet(u).v,
        }
    }

    fn jet(&self, u: &[f64; 4]) -> Option<Jet> {
        Some(self.eval_jet(u))
    }
}

/// How partial derivatives of coefficient fields are obtained.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    #[default]
    Analytic,
    FiniteDifference,
    /// Analytic values, cross-checked against finite differences.
    CrossCheck,
}

/// Tolerance of the analytic/finite-difference cross check.
pub const CROSS_CHECK_TOL: f64 = 1e-6;

/// Step for first-order central differences at coordinate `x`.
pub fn fd_step(x: f64) -> f64 {
    x.abs().max(1.0) * f64::EPSILON.cbrt()
}

/// Step for second-order central differences at coordinate `x`.
pub fn fd_step2(x: f64) -> f64 {
    x.abs().max(1.0) * f64::EPSILON.powf(0.25)
}

/// Central-difference jet assembled from point values only.
pub fn fd_jet(f: &dyn ScalarField, u: &[f64; 4]) -> Jet {
    fd_jet_order(f, u, true)
}

fn fd_jet_order(f: &dyn ScalarField, u: &[f64; 4], second: bool) -> Jet {
    let mut out = Jet::constant(f.value(u));
    for i in 0..4 {
        let h = fd_step(u[i]);
        let mut p = *u;
        let mut m = *u;
        p[i] += h;
        m[i] -= h;
        out.g[i] = (f.value(&p) - f.value(&m)) / (2.0 * h);
    }
    if !second {
        return out;
    }
    for i in 0..4 {
        let hi = fd_step2(u[i]);
        for j in i..4 {
            let hj = fd_step2(u[j]);
            let v = if i == j {
                let mut p = *u;
                let mut m = *u;
                p[i] += hi;
                m[i] -= hi;
                (f.value(&p) - 2.0 * out.v + f.value(&m)) / (hi * hi)
            } else {
                let shifted = |si: f64, sj: f64| {
                    let mut w = *u;
                    w[i] += si * hi;
                    w[j] += sj * hj;
                    f.value(&w)
                };
                (shifted(1.0, 1.0) - shifted(1.0, -1.0) - shifted(-1.0, 1.0) + shifted(-1.0, -1.0))
                    / (4.0 * hi * hj)
            };
            out.h[i][j] = v;
            out.h[j][i] = v;
        }
    }
    out
}

/// Failure to produce derivatives in the requested mode.
#[derive(Clone, Debug, PartialEq)]
pub enum JetError {
    MissingAnalytic,
    Mismatch { component: usize, analytic: f64, finite_difference: f64 },
}

/// Jet of `f` at `u` under `mode`.
pub fn field_jet(f: &dyn ScalarField, u: &[f64; 4], mode: DerivativeMode) -> Result<Jet, JetError> {
    jet_in_mode(f, u, mode, true)
}

/// Like [`field_jet`], but finite-difference mode skips the Hessian (left zero).
pub fn field_gradient(f: &dyn ScalarField, u: &[f64; 4], mode: DerivativeMode) -> Result<Jet, JetError> {
    jet_in_mode(f, u, mode, false)
}

fn jet_in_mode(f: &dyn ScalarField, u: &[f64; 4], mode: DerivativeMode, second: bool) -> Result<Jet, JetError> {
    match mode {
        DerivativeMode::FiniteDifference => Ok(fd_jet_order(f, u, second)),
        DerivativeMode::Analytic => f.jet(u).ok_or(JetError::MissingAnalytic),
        DerivativeMode::CrossCheck => {
            let a = f.jet(u).ok_or(JetError::MissingAnalytic)?;
            let n = fd_jet_order(f, u, false);
            for i in 0..4 {
                if (a.g[i] - n.g[i]).abs() > CROSS_CHECK_TOL * a.g[i].abs().max(1.0) {
                    return Err(JetError::Mismatch {
                        component: i,
                        analytic: a.g[i],
                        finite_difference: n.g[i],
                    });
                }
            }
            Ok(a)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_hessian() {
        let u = [0.3, -0.7, 1.1, 0.2];
        let f = jet_fn(|v| v[0].sin() * v[1].exp() + v[2] * v[2] * v[3]);
        let j = f.jet(&u).unwrap();
        assert!((j.g[0] - u[0].cos() * u[1].exp()).abs() < 1e-14);
        assert!((j.h[0][1] - u[0].cos() * u[1].exp()).abs() < 1e-14);
        assert!((j.h[2][2] - 2.0 * u[3]).abs() < 1e-14);
        assert!((j.h[2][3] - 2.0 * u[2]).abs() < 1e-14);
    }

    #[test]
    fn finite_differences_track_analytic_jets() {
        let u = [0.4, 0.9, -0.3, 0.5];
        let f = jet_fn(|v| (v[0] * v[1]).cos() + v[2].exp() / (2.0 + v[3]));
        let a = f.jet(&u).unwrap();
        let n = fd_jet(f.as_ref(), &u);
        for i in 0..4 {
            assert!((a.g[i] - n.g[i]).abs() < 1e-9);
            for k in 0..4 {
                assert!((a.h[i][k] - n.h[i][k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn expr_families_have_consistent_jets() {
        let e = Expr::Sum {
            terms: vec![
                Expr::Poly { terms: vec![Monomial { coef: 2.0, powers: [2, 1, 0, 0] }] },
                Expr::Trig { amp: 0.5, freq: [1.0, 0.0, 2.0, 0.0], phase: 0.1, func: TrigKind::Cos },
                Expr::Exp { amp: 1.5, rate: [0.0, -1.0, 0.0, 0.3] },
            ],
        };
        let u = [0.2, 0.7, 0.1, -0.4];
        let a = e.jet(&u).unwrap();
        let n = fd_jet(&e, &u);
        assert!((a.v - e.value(&u)).abs() < 1e-15);
        for i in 0..4 {
            assert!((a.g[i] - n.g[i]).abs() < 1e-9, "grad {i}");
        }
    }

    #[test]
    fn tabulated_reproduces_bilinear_data() {
        let e = Expr::Tabulated {
            axes: [0, 2],
            origin: [0.0, 0.0],
            spacing: [1.0, 0.5],
            shape: [2, 3],
            values: vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0],
        };
        e.validate().unwrap();
        let j = e.jet(&[0.5, 9.0, 0.25, 9.0]).unwrap();
        assert!((j.v - 5.5).abs() < 1e-14);
        assert!((j.g[0] - 10.0).abs() < 1e-14);
        assert!((j.g[2] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn cross_check_detects_inconsistent_callback() {
        struct Liar;
        impl ScalarField for Liar {
            fn value(&self, u: &[f64; 4]) -> f64 {
                u[0]
            }
            fn jet(&self, u: &[f64; 4]) -> Option<Jet> {
                Some(Jet::var(0, u[0]).scale(2.0))
            }
        }
        let r = field_jet(&Liar, &[0.0; 4], DerivativeMode::CrossCheck);
        assert!(matches!(r, Err(JetError::Mismatch { component: 0, .. })));
        assert_eq!(
            field_jet(&*value_fn(|u| u[1]), &[0.0; 4], DerivativeMode::Analytic),
            Err(JetError::MissingAnalytic)
        );
    }
}
