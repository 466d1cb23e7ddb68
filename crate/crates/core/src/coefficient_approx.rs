//! Truncation of unbounded diffusion coefficients:
//! `Q_n = φ_n Q + (1 − φ_n) η I` with `φ_n(s,x) = φ(W₁(s,x)/n)`.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ShellGrid};
use crate::linalg::{self, Matrix};
use crate::lyapunov::{generator_ratio, verify_lyapunov, StaticLyapunov, TimeDependentLyapunov};
use crate::operator_model::CoefficientField;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 {
                1.0
            } else if n == 1 {
                x
            } else {
                p1
            };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite Gauss–Legendre quadrature of `f` over `[a, b]`.
fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rule: &(Vec<f64>, Vec<f64>), panels: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (x, w) in rule.0.iter().zip(&rule.1) {
            acc += w * f(mid + 0.5 * h * x);
        }
    }
    0.5 * h * acc
}

/// `C^∞` step from 0 (z ≤ 0) to 1 (z ≥ 1).
fn smoothstep(z: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / z).exp();
        let b = (-1.0 / (1.0 - z)).exp();
        a / (a + b)
    }
}

/// Even cutoff with `φ = 1` on `[-1,1]`, `φ = 0` off `(-2,2)` and
/// `φ'(τ) = −c ψ(τ)/τ` on `(1,2)`, where `ψ` is a mollified indicator.
#[derive(Debug, Clone, Serialize)]
pub struct CutoffProfile {
    /// Mollification width at both junctions.
    pub width: f64,
    /// Normalization `c`; equals `sup |τφ'(τ)|`.
    pub slope: f64,
    /// `sup |τφ'|` over the construction scan.
    pub slope_bound: f64,
    #[serde(skip)]
    left_mass: f64,
    #[serde(skip)]
    rule: (Vec<f64>, Vec<f64>),
}

pub const CUTOFF_WIDTH: f64 = 0.05;
const SCAN_POINTS: usize = 10_000;

pub fn make_cutoff() -> CutoffProfile {
    let w = CUTOFF_WIDTH;
    let rule = gauss_legendre(20);
    let left = integrate(|u| smoothstep((u - 1.0) / w) / u, 1.0, 1.0 + w, &rule, 8);
    let right = integrate(|u| smoothstep((2.0 - u) / w) / u, 2.0 - w, 2.0, &rule, 8);
    let core = ((2.0 - w) / (1.0 + w)).ln();
    let slope = 1.0 / (left + core + right);
    let mut profile = CutoffProfile { width: w, slope, slope_bound: 0.0, left_mass: left, rule };
    profile.slope_bound = (0..=SCAN_POINTS)
        .map(|i| {
            let tau = 2.5 * i as f64 / SCAN_POINTS as f64;
            (tau * profile.derivative(tau)).abs()
        })
        .fold(0.0, f64::max);
    profile
}

impl CutoffProfile {
    fn psi(&self, tau: f64) -> f64 {
        smoothstep((tau - 1.0) / self.width) * smoothstep((2.0 - tau) / self.width)
    }

    pub fn value(&self, tau: f64) -> f64 {
        let t = tau.abs();
        let w = self.width;
        if t <= 1.0 {
            1.0
        } else if t >= 2.0 {
            0.0
        } else if t <= 1.0 + w {
            let used = integrate(|u| self.psi(u) / u, 1.0, t, &self.rule, 4);
            1.0 - self.slope * used
        } else if t < 2.0 - w {
            1.0 - self.slope * (self.left_mass + (t / (1.0 + w)).ln())
        } else {
            let remaining = integrate(|u| self.psi(u) / u, t, 2.0, &self.rule, 4);
            (self.slope * remaining).clamp(0.0, 1.0)
        }
    }

    pub fn derivative(&self, tau: f64) -> f64 {
        let t = tau.abs();
        if t <= 1.0 || t >= 2.0 {
            return 0.0;
        }
        -self.slope * self.psi(t) / t * tau.signum()
    }

    /// `τφ'(τ)`.
    pub fn slope_product(&self, tau: f64) -> f64 {
        let t = tau.abs();
        if t <= 1.0 || t >= 2.0 {
            0.0
        } else {
            -self.slope * self.psi(t)
        }
    }
}

/// The truncated operator at level `n`.
#[derive(Debug, Clone)]
pub struct ApproximationScheme {
    n: u64,
    base: CoefficientField,
    w1: TimeDependentLyapunov,
    cutoff: Arc<CutoffProfile>,
}

impl ApproximationScheme {
    pub fn new(n: u64, base: CoefficientField, w1: TimeDependentLyapunov) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("truncation level n must be a positive integer"));
        }
        Ok(Self { n, base, w1, cutoff: Arc::new(make_cutoff()) })
    }

    pub fn level(&self) -> u64 {
        self.n
    }

    pub fn base(&self) -> &CoefficientField {
        &self.base
    }

    pub fn weight(&self) -> &TimeDependentLyapunov {
        &self.w1
    }

    pub fn cutoff(&self) -> &CutoffProfile {
        &self.cutoff
    }

    /// `φ_n(s,x)`; computed from `ln W₁` so large weights do not overflow.
    pub fn phi_n(&self, s: f64, x: &[f64]) -> f64 {
        blend_weight(&self.cutoff, self.n as f64, self.w1.log_value(s, x))
    }

    pub fn field(&self) -> CoefficientField {
        let d = self.base.dim();
        let eta = self.base.eta();
        let n = self.n as f64;

        let (base, w1, cutoff) = (self.base.clone(), self.w1.clone(), self.cutoff.clone());
        let diffusion = move |s: f64, x: &[f64], out: &mut [f64]| {
            base.diffusion_into(s, x, out);
            let phi = blend_weight(&cutoff, n, w1.log_value(s, x));
            if phi < 1.0 {
                for v in out.iter_mut() {
                    *v *= phi;
                }
                for i in 0..d {
                    out[i * d + i] += (1.0 - phi) * eta;
                }
            }
        };

        let base = self.base.clone();
        let drift = move |s: f64, x: &[f64], out: &mut [f64]| base.drift_into(s, x, out);

        let (base, w1, cutoff) = (self.base.clone(), self.w1.clone(), self.cutoff.clone());
        let grad = move |s: f64, x: &[f64], i: usize, j: usize, k: usize| {
            let log_w = w1.log_value(s, x);
            let phi = blend_weight(&cutoff, n, log_w);
            let mut dq = 0.0;
            if phi > 0.0 {
                dq += phi * base.diffusion_derivative(s, x, i, j, k);
            }
            let tau = (log_w - n.ln()).exp();
            let tp = cutoff.slope_product(tau);
            if tp != 0.0 {
                // ∂_k φ_n = τφ'(τ) ∂_k ln W₁ with τ = W₁/n.
                let r = linalg::norm(x);
                let der = w1.profile.derivatives(r);
                let dlog = w1.rate_coefficient(s) * der.d1_over_r * x[k];
                let mut q = vec![0.0; d * d];
                base.diffusion_into(s, x, &mut q);
                let delta_ij = if i == j { eta } else { 0.0 };
                dq += tp * dlog * (q[i * d + j] - delta_ij);
            }
            dq
        };

        CoefficientField::new(d, eta, diffusion, drift).with_diffusion_grad(grad).with_label(format!(
            "{}[n={}]",
            self.base.label(),
            self.n
        ))
    }
}

fn blend_weight(cutoff: &CutoffProfile, n: f64, log_w: f64) -> f64 {
    let ln_n = n.ln();
    if log_w <= ln_n {
        1.0
    } else if log_w >= ln_n + std::f64::consts::LN_2 {
        0.0
    } else {
        cutoff.value((log_w - ln_n).exp())
    }
}

/// `Q_n(s,x)`.
pub fn approx_coefficients(scheme: &ApproximationScheme, s: f64, x: &[f64]) -> Result<Matrix> {
    let q = scheme.base.diffusion(s, x)?;
    let phi = scheme.phi_n(s, x);
    if phi == 1.0 {
        return Ok(q);
    }
    let d = q.dim();
    let eta = scheme.base.eta();
    let mut out = q;
    for v in out.as_mut_slice().iter_mut() {
        *v *= phi;
    }
    for i in 0..d {
        out.as_mut_slice()[i * d + i] += (1.0 - phi) * eta;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApproxCheck {
    pub id: String,
    pub pass: bool,
    pub value: f64,
    pub bound: f64,
    pub location: Option<(f64, Vec<f64>)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ApproxReport {
    pub level: u64,
    pub checks: Vec<ApproxCheck>,
    /// `Q_n = Q` at every grid node (the shell lies outside the grid).
    pub identical_to_base: bool,
    pub shell_nodes: usize,
    pub lyapunov_violations: Option<usize>,
    pub grid: GridSpec,
    pub pass: bool,
}

impl ApproxReport {
    pub fn check(&self, id: &str) -> Option<&ApproxCheck> {
        self.checks.iter().find(|c| c.id == id)
    }
}

/// Checks `A_nV ≤ M`, symmetry, `η`-ellipticity and boundedness of `Q_n`
/// and `∇Q_n` on `grid`, and optionally that `w` stays a Lyapunov function
/// for `A_n` with the same rate.
pub fn verify_approx(
    scheme: &ApproximationScheme,
    v: &StaticLyapunov,
    w: Option<&TimeDependentLyapunov>,
    grid: &ShellGrid,
) -> Result<ApproxReport> {
    let field = scheme.field();
    let d = field.dim();
    let eta = field.eta();
    let vf = v.as_fn();
    let points = grid.points();

    let mut av_max = f64::NEG_INFINITY;
    let mut av_at = None;
    let mut ellip_min = f64::INFINITY;
    let mut ellip_at = None;
    let mut asym: f64 = 0.0;
    let mut q_sup: f64 = 0.0;
    let mut q_at = None;
    let mut dq_sup: f64 = 0.0;
    let mut identical = true;
    let mut shell_nodes = 0;

    for &s in grid.times() {
        for x in &points {
            let ratio = generator_ratio(&field, &vf, s, x)?;
            let worst = ratio.full.max(ratio.reduced);
            let value = if worst > 0.0 { worst * vf.value(x) } else { worst };
            if value > av_max {
                av_max = value;
                av_at = Some((s, x.clone()));
            }
            let qn = approx_coefficients(scheme, s, x)?;
            let phi = scheme.phi_n(s, x);
            if phi < 1.0 {
                identical = false;
            }
            if phi > 0.0 && phi < 1.0 {
                shell_nodes += 1;
            }
            asym = asym.max(qn.asymmetry());
            for dir in grid.directions() {
                let e = qn.quad_form(dir) / linalg::dot(dir, dir) - eta;
                if e < ellip_min {
                    ellip_min = e;
                    ellip_at = Some((s, x.clone()));
                }
            }
            if qn.max_abs() > q_sup {
                q_sup = qn.max_abs();
                q_at = Some((s, x.clone()));
            }
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        dq_sup = dq_sup.max(field.diffusion_derivative(s, x, i, j, k).abs());
                    }
                }
            }
        }
    }

    let tol = 1e-10;
    let mut checks = vec![
        ApproxCheck {
            id: "generator_bound".into(),
            pass: av_max <= v.m_bound * (1.0 + tol) + tol,
            value: av_max,
            bound: v.m_bound,
            location: av_at,
        },
        ApproxCheck {
            id: "ellipticity".into(),
            pass: ellip_min >= -tol * eta.max(1.0),
            value: ellip_min,
            bound: 0.0,
            location: ellip_at,
        },
        ApproxCheck { id: "symmetry".into(), pass: asym <= tol, value: asym, bound: tol, location: None },
        ApproxCheck {
            id: "q_bounded".into(),
            pass: q_sup.is_finite(),
            value: q_sup,
            bound: f64::INFINITY,
            location: q_at,
        },
        ApproxCheck {
            id: "dq_bounded".into(),
            pass: dq_sup.is_finite(),
            value: dq_sup,
            bound: f64::INFINITY,
            location: None,
        },
    ];

    let mut lyapunov_violations = None;
    if let Some(w) = w {
        let cert = verify_lyapunov(w, &field, grid)?;
        checks.push(ApproxCheck {
            id: "lyapunov_preserved".into(),
            pass: cert.pass(),
            value: cert.violation_count as f64,
            bound: 0.0,
            location: cert.violations.first().map(|v| (v.s, v.x.clone())),
        });
        lyapunov_violations = Some(cert.violation_count);
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(ApproxReport {
        level: scheme.n,
        checks,
        identical_to_base: identical,
        shell_nodes,
        lyapunov_violations,
        grid: grid.spec(),
        pass,
    })
}
