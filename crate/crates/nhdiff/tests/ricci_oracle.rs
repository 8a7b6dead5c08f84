//! The decoupled equations against Ricci components of the canonical
//! d-connection, obtained by central differences of the connection
//! coefficients.

use nhdiff::ansatz::{eq1, eq2, eq3, eq4};
use nhdiff::field::{jet_fn, Jet};
use nhdiff::geometry::*;

fn ricci(spec: &MetricSpec, u: [f64; 4]) -> Mat4 {
    let at = |u: [f64; 4]| PointData::eval(spec, &ChartPoint::from_coords(u).unwrap()).unwrap();
    let pd = at(u);
    let gam = pd.canonical_gamma();
    let w = pd.anholonomy();
    let e = pd.frame();
    let h = 1e-5;
    let mut dgam = vec![zero3(); 4];
    for (nu, d) in dgam.iter_mut().enumerate() {
        let (mut p, mut m) = (u, u);
        p[nu] += h;
        m[nu] -= h;
        let (gp, gm) = (at(p).canonical_gamma(), at(m).canonical_gamma());
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    d[a][b][c] = (gp[a][b][c] - gm[a][b][c]) / (2.0 * h);
                }
            }
        }
    }
    let egam = |g: usize, a: usize, b: usize, c: usize| -> f64 { (0..4).map(|mu| e[g][mu] * dgam[mu][a][b][c]).sum() };
    let mut r = [[0.0; 4]; 4];
    for b in 0..4 {
        for d in 0..4 {
            let mut s = 0.0;
            for a in 0..4 {
                s += egam(a, a, b, d) - egam(d, a, b, a);
                for m in 0..4 {
                    s += gam[m][b][d] * gam[a][m][a] - gam[m][b][a] * gam[a][m][d] - w[m][a][d] * gam[a][b][m];
                }
            }
            r[b][d] = s;
        }
    }
    r
}

type J4 = [Jet; 4];

fn g1f(u: &J4) -> Jet {
    ((u[0] * 0.3).sin() * 0.2 + u[1] * 0.1).exp()
}
fn g2f(u: &J4) -> Jet {
    (u[0] * u[1]).scale(0.15) + 1.3
}
fn h3f(u: &J4) -> Jet {
    -((u[2] * 0.7 + u[0] * 0.2).exp() + (u[1] * u[2]).sin() * 0.03 + 0.5)
}
fn h4f(u: &J4) -> Jet {
    (u[2] * 1.1 + u[1] * 0.3).exp() * 0.8 + (u[0] + u[2] * u[2]).cos() * 0.2 + 1.0
}
fn w1f(u: &J4) -> Jet {
    (u[0] * 0.4 + u[2] * 0.9).sin() * 0.3
}
fn w2f(u: &J4) -> Jet {
    u[1] * u[2] * 0.2 + 0.1
}
fn n1f(u: &J4) -> Jet {
    (u[2] * 0.5 + u[1] * 0.2).cos() * 0.4
}
fn n2f(u: &J4) -> Jet {
    u[0] * u[2] * u[2] * 0.3 + (u[2] * u[0]).sin()
}

fn generic_spec() -> MetricSpec {
    MetricSpec::diagonal([jet_fn(g1f), jet_fn(g2f)], [jet_fn(h3f), jet_fn(h4f)])
        .with_n(2, 0, jet_fn(w1f))
        .with_n(2, 1, jet_fn(w2f))
        .with_n(3, 0, jet_fn(n1f))
        .with_n(3, 1, jet_fn(n2f))
}

#[test]
fn decoupled_equations_are_ricci_components() {
    let spec = generic_spec();
    for u in [[0.3, 0.6, 0.4, 0.2], [-0.7, 0.1, 0.9, -1.5], [1.2, -0.4, 0.05, 3.0]] {
        let r = ricci(&spec, u);
        let v = Jet::vars(&u);
        let (g1, g2, h3, h4) = (g1f(&v), g2f(&v), h3f(&v), h4f(&v));
        let tol = 1e-7;
        assert!((r[0][0] / g1.v - eq1(&g1, &g2, 0.0)).abs() < tol, "h-equation at {u:?}");
        assert!((r[1][1] / g2.v - eq1(&g1, &g2, 0.0)).abs() < tol);
        assert!((r[2][2] / h3.v - eq2(&h3, &h4, 0.0)).abs() < tol, "v-equation at {u:?}");
        assert!((r[3][3] / h4.v - eq2(&h3, &h4, 0.0)).abs() < tol);
        let (w, n) = ([w1f(&v), w2f(&v)], [n1f(&v), n2f(&v)]);
        for k in 0..2 {
            assert!((r[2][k] - eq3(&h3, &h4, w[k].v, k)).abs() < tol, "R_3{k} at {u:?}: {} vs {}", r[2][k], eq3(&h3, &h4, w[k].v, k));
            assert!((r[3][k] - eq4(&h3, &h4, &n[k])).abs() < tol, "R_4{k} at {u:?}: {} vs {}", r[3][k], eq4(&h3, &h4, &n[k]));
        }
    }
}

/// With `n = int sqrt|h3| / |h4|^{3/2} dt` the off-diagonal `R_4k` vanishes
/// for arbitrary `h3(x, t)`, `h4(x, t)`.
#[test]
fn n_integrand_annihilates_r4k() {
    let u = [0.3, 0.6, 0.4, 0.2];
    let v = Jet::vars(&u);
    let (h3, h4) = (h3f(&v), h4f(&v));
    let mut n = Jet::constant(0.0);
    let q = h3.abs().sqrt() * h4.abs().powf(-1.5);
    n.g[2] = q.v;
    n.h[2][2] = q.g[2];
    assert!(eq4(&h3, &h4, &n).abs() < 1e-13);
}
