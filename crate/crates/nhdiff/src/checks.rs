//! The acceptance checks, runnable by name from the command line and from tests.
//!
//! Each check builds its own inputs from a master seed, compares against an
//! independent oracle where one is needed, and reports pass/fail together with
//! the measured quantities and wall time. A check that exceeds its time budget
//! fails.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::ansatz::{
    generate_family_a, lc_constraint_check, residuals, solve_psi, GeneratingData, Input, PsiOptions, SolveOptions, Stencil, LC_TOL,
};
use crate::field::{constant, jet_fn, value_fn, DerivativeMode, Field};
use crate::fokker_planck::{
    build_fp_generator, build_generator_ito, build_generator_strat, build_laplace_beltrami, build_velocity_laplacian, fokker_planck_evolve,
    Boundary, DensityGrid, Lattice, LatticeAxis,
};
use crate::geometry::{anholonomy, canonical_dconnection, distortion, identity4, max_abs3, ChartPoint, MetricSpec, PointData, H_INDICES, V_INDICES};
use crate::grid::{Axis, Grid2, Grid3, GridField};
use crate::rng::{derive_seed, NormalStream};
use crate::sde::{
    gr_relativistic_diffusion, integrate_ito, integrate_stratonovich, relativistic_state, sample_wiener, sr_relativistic_diffusion,
    ForceFn, Interpretation, RelativisticOptions, RelativisticState, Sampling, SdeSystem, WienerConfig,
};
use crate::stochastic_metrics::{
    ensemble_statistics, generate_ensemble, stratonovich_identity_study, Coefficient, EnsembleOptions, FamilyData, InitialField,
    RandomGeneratorConfig, TildeSource,
};
use crate::{Error, Result};

type Mat4 = [[f64; 4]; 4];
type Tensor3 = [[[f64; 4]; 4]; 4];

/// Master seed of the acceptance run.
pub const DEFAULT_SEED: u64 = 2024;

#[derive(Clone, Copy, Debug)]
pub struct CheckInfo {
    pub id: usize,
    pub name: &'static str,
    pub title: &'static str,
    /// Wall-time budget in seconds.
    pub budget: f64,
}

pub const CHECKS: [CheckInfo; 14] = [
    CheckInfo { id: 1, name: "flat-nil", title: "flat space has no connection, torsion, anholonomy or distortion", budget: 1.0 },
    CheckInfo { id: 2, name: "christoffel-oracle", title: "diagonal blocks match finite-difference Christoffel symbols", budget: 10.0 },
    CheckInfo { id: 3, name: "distortion-identity", title: "canonical connection plus distortion is Levi-Civita", budget: 30.0 },
    CheckInfo { id: 4, name: "family-a-residuals", title: "family-A solution satisfies the field equations", budget: 60.0 },
    CheckInfo { id: 5, name: "lc-gate", title: "Levi-Civita gate passes and flips", budget: 30.0 },
    CheckInfo { id: 6, name: "manufactured-psi", title: "h-equation solver recovers a manufactured solution", budget: 10.0 },
    CheckInfo { id: 7, name: "wiener-statistics", title: "Wiener increments have the right moments and are reproducible", budget: 10.0 },
    CheckInfo { id: 8, name: "ito-stratonovich", title: "Stratonovich and drift-corrected Ito ensembles agree", budget: 30.0 },
    CheckInfo { id: 9, name: "relativistic-constraint", title: "relativistic paths stay on the mass shell with orthonormal fibers", budget: 60.0 },
    CheckInfo { id: 10, name: "geodesic-limit", title: "noiseless curved paths converge to geodesics", budget: 30.0 },
    CheckInfo { id: 11, name: "mc-fp", title: "Fokker-Planck density matches Monte Carlo", budget: 120.0 },
    CheckInfo { id: 12, name: "generator-duality", title: "discrete generators and their adjoints are dual", budget: 10.0 },
    CheckInfo { id: 13, name: "stochastic-ensemble", title: "stochastic family-A ensembles are valid and scale with varpi", budget: 120.0 },
    CheckInfo { id: 14, name: "stratonovich-identity", title: "midpoint sums of W dW converge to W^2/2", budget: 10.0 },
];

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub seconds: f64,
    pub budget: f64,
    pub summary: String,
    pub metrics: Value,
}

impl CheckResult {
    /// `PASS [ 4] family-a-residuals (1.23 s): ...`
    pub fn line(&self) -> String {
        format!(
            "{} [{:2}] {} ({:.2} s of {:.0} s): {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.budget,
            self.summary
        )
    }
}

pub fn find(name: &str) -> Option<&'static CheckInfo> {
    CHECKS.iter().find(|c| c.name == name || c.id.to_string() == name)
}

/// Runs one check by name or number; unknown names are a configuration error.
pub fn run_check(name: &str, seed: u64) -> Result<CheckResult> {
    let info = find(name).ok_or_else(|| {
        Error::Config(format!("unknown check '{name}'; known: {}", CHECKS.iter().map(|c| c.name).collect::<Vec<_>>().join(", ")))
    })?;
    let s = derive_seed(seed, info.id as u64);
    let start = Instant::now();
    let out = match info.id {
        1 => flat_nil(),
        2 => christoffel_oracle(s),
        3 => distortion_identity(s),
        4 => family_a_residuals(),
        5 => lc_gate(),
        6 => manufactured_psi(),
        7 => wiener_statistics(s),
        8 => ito_stratonovich(s),
        9 => relativistic_constraint(s),
        10 => geodesic_limit(),
        11 => mc_fp(s),
        12 => generator_duality(s),
        13 => stochastic_ensemble(s),
        _ => stratonovich_identity(s),
    };
    let seconds = start.elapsed().as_secs_f64();
    let (pass, summary, metrics) = match out {
        Ok(o) => o,
        Err(e) => (false, format!("error: {e}"), json!({"error": e.to_string()})),
    };
    let in_time = seconds < info.budget;
    let summary = if in_time { summary } else { format!("{summary}; over time budget") };
    Ok(CheckResult { id: info.id, name: info.name, pass: pass && in_time, seconds, budget: info.budget, summary, metrics })
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    CHECKS.iter().map(|c| run_check(c.name, seed).expect("known check")).collect()
}

type Outcome = Result<(bool, String, Value)>;

// ---------------------------------------------------------------------------
// Oracles

fn pt(u: [f64; 4]) -> Result<ChartPoint> {
    ChartPoint::from_coords(u)
}

fn invert4(m: &Mat4) -> Mat4 {
    let mut a = *m;
    let mut inv = identity4();
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).expect("nonempty");
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

/// Coordinate metric from the quadratic form `sum g_i (dx^i)^2 + sum h_a (dy^a + N^a_i dx^i)^2`.
fn coordinate_metric(spec: &MetricSpec, u: &[f64; 4]) -> Mat4 {
    let d = [spec.g[0].value(u), spec.g[1].value(u), spec.h[0].value(u), spec.h[1].value(u)];
    let n = [[spec.n[0][0].value(u), spec.n[0][1].value(u)], [spec.n[1][0].value(u), spec.n[1][1].value(u)]];
    let form = |v: &[f64; 4]| {
        let mut q = d[0] * v[0] * v[0] + d[1] * v[1] * v[1];
        for a in 0..2 {
            let s = v[2 + a] + n[a][0] * v[0] + n[a][1] * v[1];
            q += d[2 + a] * s * s;
        }
        q
    };
    let mut g = [[0.0; 4]; 4];
    for mu in 0..4 {
        for nu in 0..4 {
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

/// `out[a][b][c] = Gamma^a_{bc}` of the coordinate metric by central differences.
fn christoffel_fd(spec: &MetricSpec, u: &[f64; 4]) -> Tensor3 {
    let h = 1e-5;
    let mut dg = [[[0.0; 4]; 4]; 4];
    for k in 0..4 {
        let (mut p, mut m) = (*u, *u);
        p[k] += h;
        m[k] -= h;
        let (gp, gm) = (coordinate_metric(spec, &p), coordinate_metric(spec, &m));
        for a in 0..4 {
            for b in 0..4 {
                dg[k][a][b] = (gp[a][b] - gm[a][b]) / (2.0 * h);
            }
        }
    }
    let inv = invert4(&coordinate_metric(spec, u));
    let mut out = [[[0.0; 4]; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                out[a][b][c] = (0..4).map(|d| 0.5 * inv[a][d] * (dg[c][b][d] + dg[b][c][d] - dg[d][b][c])).sum();
            }
        }
    }
    out
}

/// Coordinate Levi-Civita connection expressed in the N-adapted frame.
fn lc_frame_fd(spec: &MetricSpec, u: &[f64; 4]) -> Tensor3 {
    let chr = christoffel_fd(spec, u);
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
    let d = invert4(&e);
    let h = 1e-6;
    let mut de = [[[0.0; 4]; 4]; 4];
    for nu in 0..4 {
        let (mut p, mut m) = (*u, *u);
        p[nu] += h;
        m[nu] -= h;
        let (ep, em) = (frame_at(&p), frame_at(&m));
        for b in 0..4 {
            for mu in 0..4 {
                de[nu][b][mu] = (ep[b][mu] - em[b][mu]) / (2.0 * h);
            }
        }
    }
    let mut out = [[[0.0; 4]; 4]; 4];
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

/// `sign (base + amp sin(k . u + phase) + quad u_p u_q)` with seeded coefficients.
fn random_field(s: &mut NormalStream, sign: f64, base: f64, amp: f64, quad: f64) -> Field {
    let k: [f64; 4] = std::array::from_fn(|_| 2.0 * s.uniform() - 1.0);
    let phase = 2.0 * PI * s.uniform();
    let a = amp * s.uniform();
    let b = quad * (2.0 * s.uniform() - 1.0);
    let p = (4.0 * s.uniform()) as usize % 4;
    let q = (4.0 * s.uniform()) as usize % 4;
    jet_fn(move |u| {
        let arg = u[0].scale(k[0]) + u[1].scale(k[1]) + u[2].scale(k[2]) + u[3].scale(k[3]) + phase;
        (arg.sin().scale(a) + (u[p] * u[q]).scale(b) + base).scale(sign)
    })
}

fn random_diagonal(s: &mut NormalStream) -> MetricSpec {
    let mut f = |sign: f64| {
        let base = 1.0 + s.uniform();
        random_field(s, sign, base, 0.3, 0.2)
    };
    let g = [f(1.0), f(1.0)];
    let h = [f(-1.0), f(1.0)];
    MetricSpec::diagonal(g, h)
}

fn random_point(s: &mut NormalStream) -> [f64; 4] {
    std::array::from_fn(|_| s.uniform())
}

// ---------------------------------------------------------------------------
// Geometry

fn flat_nil() -> Outcome {
    let spec = MetricSpec::flat();
    let mut worst: f64 = 0.0;
    for u in [[0.0; 4], [0.3, -1.2, 2.0, 0.7], [5.0, 4.0, -3.0, 1.0]] {
        let p = pt(u)?;
        let c = canonical_dconnection(&spec, &p)?;
        worst = worst.max(max_abs3(&c.gamma)).max(max_abs3(&c.torsion)).max(max_abs3(&anholonomy(&spec, &p)?.w));
        worst = worst.max(max_abs3(&distortion(&spec, &p)?));
    }
    Ok((worst < 1e-12, format!("max component {worst:.1e} (bound 1e-12)"), json!({"max": worst})))
}

fn christoffel_oracle(seed: u64) -> Outcome {
    let mut s = NormalStream::new(seed, 0);
    let (mut ea, mut ef): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let spec = random_diagonal(&mut s);
        let u = random_point(&mut s);
        let oracle = christoffel_fd(&spec, &u);
        let a = canonical_dconnection(&spec, &pt(u)?)?.gamma;
        let f = canonical_dconnection(&spec.clone().with_mode(DerivativeMode::FiniteDifference), &pt(u)?)?.gamma;
        for blk in [H_INDICES, V_INDICES] {
            for &i in &blk {
                for &j in &blk {
                    for &k in &blk {
                        ea = ea.max((a[i][j][k] - oracle[i][j][k]).abs());
                        ef = ef.max((f[i][j][k] - oracle[i][j][k]).abs());
                    }
                }
            }
        }
    }
    let pass = ea < 1e-6 && ef < 1e-4;
    Ok((pass, format!("analytic {ea:.1e} (bound 1e-6), finite-difference {ef:.1e} (bound 1e-4)"), json!({"analytic": ea, "finite_difference": ef})))
}

fn distortion_identity(seed: u64) -> Outcome {
    let mut s = NormalStream::new(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut spec = random_diagonal(&mut s);
        for a in 0..2 {
            for k in 0..2 {
                spec.n[a][k] = random_field(&mut s, 1.0, 0.0, 0.4, 0.3);
            }
        }
        let u = random_point(&mut s);
        let p = pt(u)?;
        let can = canonical_dconnection(&spec, &p)?.gamma;
        let z = distortion(&spec, &p)?;
        let oracle = lc_frame_fd(&spec, &u);
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    worst = worst.max((can[a][b][c] + z[a][b][c] - oracle[a][b][c]).abs());
                }
            }
        }
    }
    Ok((worst < 1e-5, format!("max deviation {worst:.1e} (bound 1e-5)"), json!({"max": worst})))
}

// ---------------------------------------------------------------------------
// Ansatz

fn demo_phi() -> Field {
    jet_fn(|u| u[2] + (u[0].sin() * u[1].sin()).scale(0.1))
}

fn demo_a() -> GeneratingData {
    let mut g = GeneratingData::new(demo_phi(), 1.0);
    g.h4_0 = 20.0.into();
    g
}

fn family_a_residuals() -> Outcome {
    let grid = Grid3::cube(0.0, 1.0, 32)?;
    let sol = generate_family_a(&demo_a(), &grid, &SolveOptions::default())?;
    let rep = residuals(&sol, DerivativeMode::Analytic)?;
    let r = rep.max_234();
    let stencil = sol.psi.stencil_residuals().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pass = r < 1e-6 && stencil < 1e-10;
    Ok((
        pass,
        format!("eqs 2-4 max {r:.1e} (bound 1e-6), h-stencil {stencil:.1e} (bound 1e-10)"),
        json!({"r2": rep.norms[1].max, "r3": rep.norms[2].max, "r4": rep.norms[3].max, "psi_stencil": stencil}),
    ))
}

fn lc_gate() -> Outcome {
    let grid = Grid3::cube(0.0, 1.0, 16)?;
    let mut gen = GeneratingData::new(jet_fn(|u| u[2] + (u[2] * u[2]).scale(0.2)), 1.0);
    gen.h4_0 = 40.0.into();
    gen.n.n1 = [jet_fn(|u| u[1]).into(), jet_fn(|u| u[0]).into()];
    let sol = generate_family_a(&gen, &grid, &SolveOptions::default())?;
    let rep = lc_constraint_check(&sol, LC_TOL, DerivativeMode::Analytic);
    let spec = sol.metric_spec();
    let mut z: f64 = 0.0;
    for u in [[0.3, 0.4, 0.5, 0.0], [0.71, 0.12, 0.93, 1.0], [0.05, 0.95, 0.2, -2.0], [0.5, 0.5, 0.5, 0.5]] {
        z = z.max(max_abs3(&distortion(&spec, &pt(u)?)?));
    }
    gen.n.n2 = [0.5.into(), 0.0.into()];
    let flipped = lc_constraint_check(&generate_family_a(&gen, &grid, &SolveOptions::default())?, LC_TOL, DerivativeMode::Analytic);
    let pass = rep.pass && z < 1e-6 && !flipped.pass;
    Ok((
        pass,
        format!(
            "base {} (max {:.1e}), |Z| {z:.1e} (bound 1e-6), with 2n != 0 {} (dominant {})",
            if rep.pass { "PASS" } else { "FAIL" },
            rep.max.iter().fold(0.0f64, |m, v| m.max(*v)),
            if flipped.pass { "PASS" } else { "FAIL" },
            flipped.dominant
        ),
        json!({"base": rep.max, "distortion": z, "flipped": flipped.max, "flipped_dominant": flipped.dominant}),
    ))
}

fn manufactured_error(n: usize, stencil: Stencil) -> Result<f64> {
    let a = Axis::new(0.0, PI, n)?;
    let g2 = Grid2::new(a, a)?;
    let exact = |x: f64, y: f64| x.sin() * y.sin();
    let ups = value_fn(move |u| -exact(u[0], u[1]));
    let bnd = value_fn(move |u| exact(u[0], u[1]));
    let s = solve_psi(ups.as_ref(), &g2, bnd.as_ref(), PsiOptions { stencil, tol: 1e-10, omega: 2.0 / (1.0 + (PI / (n - 1) as f64).sin()), ..Default::default() })?;
    let mut e: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            e = e.max((s.values[g2.index(i, j)] - exact(a.at(i), a.at(j))).abs());
        }
    }
    Ok(e)
}

fn manufactured_psi() -> Outcome {
    let sizes = [33, 65, 129];
    let compact: Vec<f64> = sizes.iter().map(|&n| manufactured_error(n, Stencil::Compact)).collect::<Result<_>>()?;
    let five: Vec<f64> = sizes[..2].iter().map(|&n| manufactured_error(n, Stencil::FivePoint)).collect::<Result<_>>()?;
    let ratios: Vec<f64> = compact.windows(2).map(|w| w[0] / w[1]).collect();
    let pass = compact[1] < 1e-6 && ratios.iter().all(|r| *r >= 3.5);
    Ok((
        pass,
        format!(
            "compact L-inf at 65^2 {:.1e} (bound 1e-6), ratios {:.1}/{:.1} (bound 3.5); five-point {:.1e} at 65^2, ratio {:.2}",
            compact[1],
            ratios[0],
            ratios[1],
            five[1],
            five[0] / five[1]
        ),
        json!({"sizes": sizes, "compact": compact, "five_point": five}),
    ))
}

// ---------------------------------------------------------------------------
// Stochastic processes

fn wiener_statistics(seed: u64) -> Outcome {
    let cfg = WienerConfig::new(0.7, 4, seed, 0.01, 250_000);
    let w = sample_wiener(&cfg, 0)?;
    let n = w.len() as f64;
    let var0 = cfg.rho * cfg.dt;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let (sm, sv) = ((var0 / n).sqrt(), var0 * (2.0 / (n - 1.0)).sqrt());
    let sys = SdeSystem::scalar(|_, _| 1.0, |_, u| -u, Interpretation::Ito);
    let run = |threads: usize| -> Result<Vec<f64>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| integrate_ito(&sys, &[0.0], &WienerConfig::new(1.0, 1, seed, 0.01, 100), &Sampling::endpoints(256)))
            .map(|e| e.terminal_states().map(|s| s[0]).collect())
    };
    let (one, four) = (run(1)?, run(4)?);
    let bitwise = one.iter().zip(&four).all(|(a, b)| a.to_bits() == b.to_bits());
    let pass = mean.abs() < 3.0 * sm && (var - var0).abs() < 3.0 * sv && bitwise;
    Ok((
        pass,
        format!(
            "{} increments: mean {:.2} sigma, variance {:+.2} sigma; 1 vs 4 threads {}",
            w.len(),
            mean / sm,
            (var - var0) / sv,
            if bitwise { "bitwise equal" } else { "differ" }
        ),
        json!({"samples": w.len(), "mean": mean, "variance": var, "expected_variance": var0, "bitwise": bitwise}),
    ))
}

/// Mean, variance and their standard errors.
fn moments(x: &[f64]) -> [f64; 4] {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = x.iter().map(|a| (a - m).powi(4)).sum::<f64>() / n;
    [m, (v / n).sqrt(), v, ((m4 - v * v) / n).sqrt()]
}

fn ito_stratonovich(seed: u64) -> Outcome {
    let strat = SdeSystem::scalar(|_, u| u, |_, _| 0.0, Interpretation::Stratonovich);
    let ito = strat.converted(1.0);
    let paths = 100_000;
    let a = integrate_stratonovich(&strat, &[1.0], &WienerConfig::new(1.0, 1, seed, 0.01, 100), &Sampling::endpoints(paths))?;
    let b = integrate_ito(&ito, &[1.0], &WienerConfig::new(1.0, 1, derive_seed(seed, 1), 0.01, 100), &Sampling::endpoints(paths))?;
    let xa: Vec<f64> = a.terminal_states().map(|s| s[0]).collect();
    let xb: Vec<f64> = b.terminal_states().map(|s| s[0]).collect();
    let (ma, mb) = (moments(&xa), moments(&xb));
    let zm = (ma[0] - mb[0]) / ma[1].hypot(mb[1]);
    let zv = (ma[2] - mb[2]) / ma[3].hypot(mb[3]);
    let pass = zm.abs() < 3.0 && zv.abs() < 3.0;
    Ok((
        pass,
        format!("{paths} paths each: mean {:.4} vs {:.4} ({zm:+.2} sigma), variance {:.3} vs {:.3} ({zv:+.2} sigma)", ma[0], mb[0], ma[2], mb[2]),
        json!({"stratonovich": ma, "ito": mb, "z_mean": zm, "z_variance": zv}),
    ))
}

/// Curved Lorentzian chart used by the relativistic checks.
pub fn curved_lorentzian() -> MetricSpec {
    MetricSpec::diagonal(
        [jet_fn(|u| u[2].scale(0.3).sin().scale(0.2) + 1.0), jet_fn(|u| u[0].scale(0.5).exp())],
        [jet_fn(|u| -(u[0] * u[0]).scale(0.1) - 1.0), jet_fn(|u| u[1].scale(0.4).cos().scale(0.3) + 1.2)],
    )
    .with_n(2, 0, jet_fn(|u| u[1].scale(0.2)))
}

fn relativistic_constraint(seed: u64) -> Outcome {
    let opts = RelativisticOptions { reortho_every: 100 };
    let s0 = RelativisticState::new([0.1, 0.2, 0.3, 0.4], [0.2, 0.0, -0.1]);
    let cfg = WienerConfig::new(1.0, 3, seed, 0.001, 1000);
    let smp = Sampling::endpoints(10_000);
    let sr = sr_relativistic_diffusion(&s0, None, &cfg, &smp, &opts)?;
    let gr = gr_relativistic_diffusion(&curved_lorentzian(), &s0, None, &cfg, &smp, &opts)?;
    let failed = sr.failed() + gr.failed();
    let (ms, mg) = (sr.max_monitors(), gr.max_monitors());
    let constraint = ms.constraint.max(mg.constraint);
    let gram = ms.gram.max(ms.gram_reortho).max(mg.gram).max(mg.gram_reortho);
    let force: ForceFn = Arc::new(|_, x, v| [0.1 * x[0], -v[1], 0.0]);
    let small = Sampling { paths: 64, first_id: 0, save_every: 50 };
    let small_cfg = WienerConfig::new(1.0, 3, seed, 0.001, 1000);
    let a = sr_relativistic_diffusion(&s0, Some(&force), &small_cfg, &small, &opts)?;
    let b = gr_relativistic_diffusion(&MetricSpec::flat(), &s0, Some(&force), &small_cfg, &small, &opts)?;
    let bitwise = a == b;
    let pass = failed == 0 && constraint < 1e-10 && gram < 1e-6 && bitwise;
    Ok((
        pass,
        format!(
            "2 x 10^4 paths of 10^3 steps: mass shell {constraint:.1e} (bound 1e-10), Gram {gram:.1e} (bound 1e-6), failed {failed}; GR on flat {} SR",
            if bitwise { "bitwise equals" } else { "differs from" }
        ),
        json!({"constraint": constraint, "gram": gram, "failed": failed, "flat_bitwise": bitwise}),
    ))
}

/// Autoparallel of the canonical d-connection by RK4 in N-adapted components.
fn rk4_geodesic(spec: &MetricSpec, x0: [f64; 4], va0: [f64; 4], tau: f64, n: usize) -> Result<[f64; 4]> {
    let rhs = |x: &[f64; 4], va: &[f64; 4]| -> Result<([f64; 4], [f64; 4])> {
        let pd = PointData::eval(spec, &pt(*x)?)?;
        let g = pd.canonical_gamma();
        let fr = pd.frame();
        let dx = std::array::from_fn(|mu| (0..4).map(|a| va[a] * fr[a][mu]).sum());
        let dv = std::array::from_fn(|m| {
            let mut s = 0.0;
            for a in 0..4 {
                for c in 0..4 {
                    s -= g[m][a][c] * va[a] * va[c];
                }
            }
            s
        });
        Ok((dx, dv))
    };
    let add = |x: &[f64; 4], d: &[f64; 4], h: f64| -> [f64; 4] { std::array::from_fn(|i| x[i] + h * d[i]) };
    let (mut x, mut va) = (x0, va0);
    let h = tau / n as f64;
    for _ in 0..n {
        let k1 = rhs(&x, &va)?;
        let k2 = rhs(&add(&x, &k1.0, h / 2.0), &add(&va, &k1.1, h / 2.0))?;
        let k3 = rhs(&add(&x, &k2.0, h / 2.0), &add(&va, &k2.1, h / 2.0))?;
        let k4 = rhs(&add(&x, &k3.0, h), &add(&va, &k3.1, h))?;
        x = std::array::from_fn(|i| x[i] + h / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]));
        va = std::array::from_fn(|i| va[i] + h / 6.0 * (k1.1[i] + 2.0 * k2.1[i] + 2.0 * k3.1[i] + k4.1[i]));
    }
    Ok(x)
}

fn geodesic_limit() -> Outcome {
    let spec = curved_lorentzian();
    let x0 = [0.3, 0.2, 0.1, 0.4];
    let s0 = RelativisticState::new(x0, [0.4, -0.3, 0.2]);
    let d = PointData::eval(&spec, &pt(x0)?)?.adapted_diag();
    let v4 = s0.four_velocity();
    let va0 = std::array::from_fn(|a| v4[a] / d[a].abs().sqrt());
    let oracle = rk4_geodesic(&spec, x0, va0, 1.0, 800)?;
    let mut errs = Vec::new();
    for steps in [25usize, 50, 100, 200] {
        let c = WienerConfig::new(0.0, 3, 0, 1.0 / steps as f64, steps);
        let ens = gr_relativistic_diffusion(&spec, &s0, None, &c, &Sampling::endpoints(1), &RelativisticOptions::default())?;
        let end = relativistic_state(&ens, 0, 1);
        errs.push((0..4).map(|i| (end.x[i] - oracle[i]).abs()).fold(0.0, f64::max));
    }
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let pass = orders.iter().all(|o| *o >= 1.0);
    Ok((
        pass,
        format!("errors {:.1e} .. {:.1e} over dt = 1/25 .. 1/200, observed orders {:.2?} (bound 1)", errs[0], errs[3], orders),
        json!({"errors": errs, "orders": orders}),
    ))
}

// ---------------------------------------------------------------------------
// Fokker-Planck

fn mc_fp(seed: u64) -> Outcome {
    let spec = MetricSpec::flat();
    let l = Lattice::square(-6.3, 6.3, 63, Boundary::Periodic)?;
    let phi0 = DensityGrid::point_mass(&spec, &l, &[0.0, 0.0])?;
    let fp = fokker_planck_evolve(&spec, None, 1.0, &phi0, 1.0, 0.01)?;
    let drift = fp.mass_history.iter().map(|m| (m[1] - 1.0).abs()).fold(0.0, f64::max);
    let noise = SdeSystem::new(2, 2, Arc::new(|_, _| vec![1.0, 0.0, 0.0, 1.0]), Arc::new(|_, _| vec![0.0, 0.0]), Interpretation::Ito);
    let ens = integrate_ito(&noise, &[0.0, 0.0], &WienerConfig::new(1.0, 2, seed, 0.1, 10), &Sampling::endpoints(100_000))?;
    let coarse = fp.coarsen(3)?;
    let mc = DensityGrid::from_samples(&coarse.lattice, coarse.weight.clone(), ens.terminal_states())?;
    let d = coarse.l1_distance(&mc);
    let pass = d < 0.05 && drift < 1e-8;
    Ok((
        pass,
        format!("L1 {d:.3} on 21^2 bins (bound 0.05), mass drift {drift:.1e} (bound 1e-8)"),
        json!({"l1": d, "mass_drift": drift, "paths": 100_000, "bins": coarse.lattice.len()}),
    ))
}

fn random_vec(s: &mut NormalStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| s.uniform() - 0.5).collect()
}

fn generator_duality(seed: u64) -> Outcome {
    let mut s = NormalStream::new(seed, 0);
    let curved = MetricSpec::diagonal(
        [jet_fn(|u| u[0].sin().scale(0.2) + 1.0), jet_fn(|u| u[1].cos().scale(0.3) + 1.5)],
        [constant(-1.0), constant(1.0)],
    )
    .with_n(2, 0, jet_fn(|u| u[1].scale(0.5)));
    let l = Lattice::square(0.0, 2.0 * PI, 24, Boundary::Periodic)?;
    let sys = SdeSystem::new(
        2,
        2,
        Arc::new(|_, u| vec![1.0 + 0.3 * u[0].sin(), 0.1, 0.0, 0.8]),
        Arc::new(|_, u| vec![u[1].cos(), 0.2]),
        Interpretation::Ito,
    );
    let drift = |x: &[f64; 4]| [0.3 * x[1].sin(), -0.2 * x[0].cos(), 0.0, 0.0];
    let mut battery = Vec::new();
    for spec in [MetricSpec::flat(), curved] {
        battery.push(("ito", build_generator_ito(&sys, &spec, &l, 1.3)?));
        battery.push(("stratonovich", build_generator_strat(&sys, &spec, &l, 1.3)?));
        battery.push(("laplace_beltrami", build_laplace_beltrami(&spec, &l, 1.0)?));
        battery.push(("fokker_planck", build_fp_generator(&spec, &l, 0.8, Some(&drift))?));
    }
    let mut duality: f64 = 0.0;
    for (_, g) in &battery {
        let adj = g.adjoint();
        for _ in 0..3 {
            let (f, p) = (random_vec(&mut s, l.len()), random_vec(&mut s, l.len()));
            duality = duality.max(g.duality_residual(&adj, &f, &p));
        }
    }
    let vl = Lattice::new((0..3).map(|coord| LatticeAxis { coord, lo: -1.5, hi: 1.5, n: 12 }).collect(), Boundary::Absorbing)?;
    let vg = build_velocity_laplacian(&vl)?;
    let mut selfadj: f64 = 0.0;
    for _ in 0..3 {
        let (f, p) = (random_vec(&mut s, vl.len()), random_vec(&mut s, vl.len()));
        selfadj = selfadj.max(vg.self_adjointness_residual(&f, &p));
    }
    let pass = duality < 1e-8 && selfadj < 1e-8;
    Ok((
        pass,
        format!("{} generators: duality {duality:.1e} (bound 1e-8); velocity Laplace-Beltrami {selfadj:.1e} (bound 1e-8)", battery.len()),
        json!({"generators": battery.iter().map(|b| b.0).collect::<Vec<_>>(), "duality": duality, "velocity_self_adjointness": selfadj}),
    ))
}

// ---------------------------------------------------------------------------
// Stochastic metrics

fn bits(f: &GridField) -> Vec<u64> {
    let mut out: Vec<u64> = f.values.iter().map(|v| v.to_bits()).collect();
    for j in f.jets.iter().flatten() {
        out.extend(j.g.iter().chain(j.h.iter().flatten()).map(|v: &f64| v.to_bits()));
    }
    out
}

fn stochastic_ensemble(seed: u64) -> Outcome {
    let grid = Grid3::cube(0.0, 1.0, 16)?;
    let family = FamilyData::A(demo_a());
    let cfg = |varpi: f64, realizations: usize| RandomGeneratorConfig {
        base_phi: Input::Field(demo_phi()),
        varpi,
        tilde_source: TildeSource::HDiffusion { initial: InitialField::RandomBump { width: 0.15, amplitude: 1.0 }, rho: 0.2, psi: None },
        realizations,
        seed,
    };
    let opts = EnsembleOptions::default();
    let realizations = 40;
    let probes = [grid.index(8, 8, 15), grid.index(4, 11, 8), grid.index(12, 5, 12)];
    let mut variances = Vec::new();
    let mut acceptance = Vec::new();
    let mut worst: f64 = 0.0;
    for varpi in [0.01, 0.02, 0.04] {
        let ens = generate_ensemble(&family, &cfg(varpi, realizations), &grid, &opts)?;
        acceptance.push(ens.acceptance_rate());
        worst = worst.max(ens.worst_residual());
        let mut v = Vec::new();
        for c in [Coefficient::H3, Coefficient::H4, Coefficient::W1] {
            v.extend(ensemble_statistics(&ens, c, &probes)?.variance());
        }
        variances.push(v);
    }
    let ratios: Vec<Vec<f64>> = variances.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b / a).collect()).collect();
    let scaling = ratios.iter().flatten().all(|r| *r >= 4.0 / 1.5 && *r <= 4.0 * 1.5);
    let (rmin, rmax) = ratios.iter().flatten().fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(*r), hi.max(*r)));
    let sure = generate_family_a(&demo_a(), &grid, &opts.solve)?;
    let zero = generate_ensemble(&family, &cfg(0.0, 3), &grid, &EnsembleOptions { keep_jets: true, ..opts.clone() })?;
    let bitwise = zero.accepted() == 3
        && zero.realizations.iter().filter_map(|r| r.solution.as_ref()).all(|s| {
            [(&s.h3, &sure.h3), (&s.h4, &sure.h4), (&s.w[0], &sure.w[0]), (&s.w[1], &sure.w[1]), (&s.n[0], &sure.n[0]), (&s.n[1], &sure.n[1])]
                .iter()
                .all(|(a, b)| bits(a) == bits(b))
        });
    let pass = acceptance[0] >= 0.95 && worst < 1e-4 && scaling && bitwise;
    Ok((
        pass,
        format!(
            "accepted {:.0}% at varpi 0.01 (bound 95%), worst residual {worst:.1e} (bound 1e-4), variance ratios per doubling {rmin:.2}..{rmax:.2} (bound 4/1.5..4*1.5), varpi 0 {}",
            100.0 * acceptance[0],
            if bitwise { "bitwise sure" } else { "differs from sure" }
        ),
        json!({"acceptance": acceptance, "worst_residual": worst, "variance_ratios": ratios, "bitwise": bitwise, "realizations": realizations}),
    ))
}

fn stratonovich_identity(seed: u64) -> Outcome {
    let st = stratonovich_identity_study(seed, 20_000, 1.0, 16, 3)?;
    let decreasing = st.rms.windows(2).all(|w| w[1] < w[0]);
    let bound = 0.5 - 3.0 * st.rate_stderr;
    let pass = decreasing && st.rate >= bound;
    Ok((
        pass,
        format!(
            "RMS {:.2e} .. {:.2e} over {} .. {} steps, rate {:.3} +- {:.3} (bound 1/2 within 3 sigma)",
            st.rms[0],
            st.rms[3],
            st.steps[0],
            st.steps[3],
            st.rate,
            st.rate_stderr
        ),
        serde_json::to_value(&st).map_err(|e| Error::Io(e.to_string()))?,
    ))
}
