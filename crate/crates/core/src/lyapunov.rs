//! Radial Lyapunov functions `V = exp(δυ)` and `W(s,x) = exp(ε(t−s)^α υ(x))`.
//!
//! `υ` equals `|x|^β` outside the unit ball and an even quartic in `|x|`
//! inside it, matched to second order at `|x| = 1`. Generators are applied
//! in closed form through the radial derivatives of `υ`; everything is
//! evaluated as ratios `A G / G` so that very large weights never overflow.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ShellGrid};
use crate::linalg;
use crate::operator_model::{check_hypotheses, CoefficientField, GrowthParams};

/// Even quartic extension of `|x|^β`: `υ = a + b_c|x|² + c|x|⁴` on `|x| < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RadialProfile {
    pub beta: f64,
    pub a: f64,
    pub b_c: f64,
    pub c: f64,
}

/// `υ(r), υ'(r), υ'(r)/r, υ''(r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialDerivatives {
    pub value: f64,
    pub d1: f64,
    pub d1_over_r: f64,
    pub d2: f64,
}

/// Unique even quartic matching `r^β` to second order at `r = 1`.
pub fn smooth_radial_power(beta: f64) -> Result<RadialProfile> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::domain(format!("radial power β = {beta} must be positive")));
    }
    let profile = RadialProfile {
        beta,
        a: 1.0 - (6.0 * beta - beta * beta) / 8.0,
        b_c: beta * (4.0 - beta) / 4.0,
        c: beta * (beta - 2.0) / 8.0,
    };
    Ok(profile)
}

impl RadialProfile {
    /// Minimum of the inner quartic over `0 ≤ r ≤ 1`. Negative exactly when
    /// `2 < β < 4` (the constant term `a` dips below zero).
    pub fn inner_minimum(&self) -> f64 {
        // a + b s + c s² on s = r² ∈ [0, 1]
        let q = |s: f64| self.a + self.b_c * s + self.c * s * s;
        let mut m = q(0.0).min(q(1.0));
        if self.c > 0.0 {
            let s = -self.b_c / (2.0 * self.c);
            if (0.0..=1.0).contains(&s) {
                m = m.min(q(s));
            }
        }
        m
    }

    pub fn value(&self, r: f64) -> f64 {
        if r >= 1.0 {
            r.powf(self.beta)
        } else {
            let r2 = r * r;
            self.a + r2 * (self.b_c + self.c * r2)
        }
    }

    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.value(linalg::norm(x))
    }

    pub fn derivatives(&self, r: f64) -> RadialDerivatives {
        if r >= 1.0 {
            let rb2 = r.powf(self.beta - 2.0);
            RadialDerivatives {
                value: rb2 * r * r,
                d1: self.beta * rb2 * r,
                d1_over_r: self.beta * rb2,
                d2: self.beta * (self.beta - 1.0) * rb2,
            }
        } else {
            let r2 = r * r;
            RadialDerivatives {
                value: self.a + r2 * (self.b_c + self.c * r2),
                d1: r * (2.0 * self.b_c + 4.0 * self.c * r2),
                d1_over_r: 2.0 * self.b_c + 4.0 * self.c * r2,
                d2: 2.0 * self.b_c + 12.0 * self.c * r2,
            }
        }
    }
}

/// `G(x) = exp(rate · υ(x))`, a frozen-time slice of `V` or `W`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpRadialFn {
    pub profile: RadialProfile,
    pub rate: f64,
}

impl ExpRadialFn {
    pub fn new(profile: RadialProfile, rate: f64) -> Self {
        Self { profile, rate }
    }

    pub fn log_value(&self, x: &[f64]) -> f64 {
        self.rate * self.profile.value_at(x)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.log_value(x).exp()
    }
}

/// `A(t)G / G` (`full`) and `(ηΔG + F·∇G) / G` (`reduced`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorRatio {
    pub full: f64,
    pub reduced: f64,
}

/// Closed-form generator ratios. `q` and `f` are `Q(t,x)`, `F(t,x)`.
fn generator_ratio_with(dim: usize, eta: f64, q: &[f64], f: &[f64], g: &ExpRadialFn, x: &[f64]) -> GeneratorRatio {
    let u = g.rate;
    if u == 0.0 {
        return GeneratorRatio { full: 0.0, reduced: 0.0 };
    }
    let r = linalg::norm(x);
    let der = g.profile.derivatives(r);
    let tr = linalg::trace(q, dim);
    if r == 0.0 {
        // ∇υ = 0 and D²υ = υ''(0)·I at the origin.
        return GeneratorRatio { full: u * der.d2 * tr, reduced: u * der.d2 * eta * dim as f64 };
    }
    let unit: Vec<f64> = x.iter().map(|c| c / r).collect();
    let qhat = linalg::quad_form(q, dim, &unit);
    let f_radial = linalg::dot(f, &unit);
    let grad_sq = der.d1 * der.d1;

    let full = u * (der.d2 * qhat + der.d1_over_r * (tr - qhat)) + u * u * grad_sq * qhat + u * der.d1 * f_radial;
    let reduced = eta * (u * (der.d2 + der.d1_over_r * (dim as f64 - 1.0)) + u * u * grad_sq) + u * der.d1 * f_radial;
    GeneratorRatio { full, reduced }
}

pub fn generator_ratio(field: &CoefficientField, g: &ExpRadialFn, t: f64, x: &[f64]) -> Result<GeneratorRatio> {
    let d = field.dim();
    let mut q = vec![0.0; d * d];
    let mut f = vec![0.0; d];
    field.diffusion_into(t, x, &mut q);
    field.drift_into(t, x, &mut f);
    let ratio = generator_ratio_with(d, field.eta(), &q, &f, g, x);
    if ratio.full.is_finite() && ratio.reduced.is_finite() {
        Ok(ratio)
    } else {
        Err(Error::Evaluation { what: "generator".into(), t, x: x.to_vec() })
    }
}

/// `(A(t)G)(x)`.
pub fn apply_generator(field: &CoefficientField, g: &ExpRadialFn, t: f64, x: &[f64]) -> Result<f64> {
    let ratio = generator_ratio(field, g, t, x)?;
    let v = ratio.full * g.value(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation { what: "generator".into(), t, x: x.to_vec() })
    }
}

/// `(ηΔG + F·∇G)(x)`.
pub fn apply_reduced_generator(field: &CoefficientField, g: &ExpRadialFn, t: f64, x: &[f64]) -> Result<f64> {
    let ratio = generator_ratio(field, g, t, x)?;
    let v = ratio.reduced * g.value(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation { what: "reduced generator".into(), t, x: x.to_vec() })
    }
}

/// Weights integrated against transition kernels.
pub trait SpaceTimeWeight: Send + Sync {
    fn log_value(&self, s: f64, x: &[f64]) -> f64;

    fn value(&self, s: f64, x: &[f64]) -> f64 {
        self.log_value(s, x).exp()
    }
}

/// The constant weight `1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitWeight;

impl SpaceTimeWeight for UnitWeight {
    fn log_value(&self, _s: f64, _x: &[f64]) -> f64 {
        0.0
    }
}

/// How the tail of `A V` was certified negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TailRoute {
    /// The bracket built from the growth constants `(Λ, κ, m, p)`.
    GrowthBracket,
    /// The exact radial bracket of the supplied coefficients, sampled on
    /// the grid's time slices and directions.
    CoefficientBracket,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailCertificate {
    pub route: TailRoute,
    pub radius: f64,
    pub growth_bracket: (f64, f64),
    pub growth_bracket_reduced: (f64, f64),
    pub coefficient_bracket: (f64, f64),
    pub coefficient_bracket_reduced: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct StaticLyapunov {
    pub profile: RadialProfile,
    pub delta: f64,
    /// Grid bound for both `A(t)V` and `ηΔV + F·∇V`.
    pub m_bound: f64,
    pub r_cert: f64,
    pub tail: TailCertificate,
    pub hypotheses_pass: bool,
    pub grid: GridSpec,
}

impl StaticLyapunov {
    pub fn as_fn(&self) -> ExpRadialFn {
        ExpRadialFn::new(self.profile, self.delta)
    }

    pub fn log_value(&self, x: &[f64]) -> f64 {
        self.delta * self.profile.value_at(x)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.log_value(x).exp()
    }
}

impl SpaceTimeWeight for StaticLyapunov {
    fn log_value(&self, _s: f64, x: &[f64]) -> f64 {
        StaticLyapunov::log_value(self, x)
    }
}

fn open_unit_fraction(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} = {v} must lie strictly inside (0, 1)")))
    }
}

fn growth_brackets(params: &GrowthParams, d: usize, eta: f64, delta: f64, r: f64) -> (f64, f64) {
    let beta = params.beta();
    let lead = d as f64 + (beta - 2.0).max(0.0);
    let growth = params.diffusion_bound(r);
    let full = lead * growth + delta * beta * r.powf(beta) * growth - params.kappa * r.powf(params.p + 1.0);
    let reduced = eta * lead + delta * beta * eta * r.powf(beta) - params.kappa * r.powf(params.p + 1.0);
    (full, reduced)
}

/// Largest value over the grid's times and directions of the exact radial
/// brackets `Tr Q + (β−2)q̂ + uβr^β q̂ + ⟨F,x⟩` (and the `ηI` analogue).
fn coefficient_brackets(field: &CoefficientField, grid: &ShellGrid, beta: f64, rate: f64, r: f64) -> (f64, f64) {
    let d = field.dim();
    let eta = field.eta();
    let mut q = vec![0.0; d * d];
    let mut f = vec![0.0; d];
    let mut worst = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &t in grid.times() {
        for dir in grid.directions() {
            let x: Vec<f64> = dir.iter().map(|c| c * r).collect();
            field.diffusion_into(t, &x, &mut q);
            field.drift_into(t, &x, &mut f);
            let qhat = linalg::quad_form(&q, d, dir);
            let fx = linalg::dot(&f, &x);
            let rb = r.powf(beta);
            let full = linalg::trace(&q, d) + (beta - 2.0) * qhat + rate * beta * rb * qhat + fx;
            let reduced = eta * (d as f64 + beta - 2.0) + rate * beta * rb * eta + fx;
            worst.0 = worst.0.max(full);
            worst.1 = worst.1.max(reduced);
        }
    }
    worst
}

fn negative_and_decreasing(pair: (f64, f64)) -> bool {
    pair.0 < 0.0 && pair.1 < pair.0
}

/// Builds `V = exp(δυ)` with `δ = delta_frac·κ/(βΛ)` and its bound `M`.
pub fn derive_static(
    field: &CoefficientField,
    params: &GrowthParams,
    delta_frac: f64,
    grid: &ShellGrid,
) -> Result<StaticLyapunov> {
    params.validate()?;
    open_unit_fraction("delta_frac", delta_frac)?;
    let beta = params.beta();
    let profile = smooth_radial_power(beta)?;
    let delta = delta_frac * params.kappa / (beta * params.lambda);
    let v = ExpRadialFn::new(profile, delta);

    let points = grid.points();
    let slice_max: Vec<Result<f64>> = grid
        .times()
        .par_iter()
        .map(|&t| {
            let mut best = f64::NEG_INFINITY;
            for x in &points {
                let ratio = generator_ratio(field, &v, t, x)?;
                let worst = ratio.full.max(ratio.reduced);
                if worst > 0.0 {
                    let val = worst * v.value(x);
                    if !val.is_finite() {
                        return Err(Error::Certification(format!(
                            "A(t)V overflows at t={t}, x={x:?}; shrink the grid or delta_frac"
                        )));
                    }
                    best = best.max(val);
                }
            }
            Ok(best)
        })
        .collect();
    let mut m_bound = 0.0_f64;
    for v in slice_max {
        m_bound = m_bound.max(v?);
    }

    let r_cert = grid.radius_max();
    if r_cert < 1.0 {
        return Err(Error::Certification(format!(
            "certification radius {r_cert} lies inside the unit ball; use R_cert ≥ 1"
        )));
    }
    let d = field.dim();
    let g1 = growth_brackets(params, d, field.eta(), delta, r_cert);
    let g2 = growth_brackets(params, d, field.eta(), delta, 2.0 * r_cert);
    let c1 = coefficient_brackets(field, grid, beta, delta, r_cert);
    let c2 = coefficient_brackets(field, grid, beta, delta, 2.0 * r_cert);
    let growth_ok = negative_and_decreasing((g1.0, g2.0)) && negative_and_decreasing((g1.1, g2.1));
    let coeff_ok = negative_and_decreasing((c1.0, c2.0)) && negative_and_decreasing((c1.1, c2.1));
    let route = if growth_ok {
        TailRoute::GrowthBracket
    } else if coeff_ok {
        TailRoute::CoefficientBracket
    } else {
        return Err(Error::Certification(format!(
            "tail bracket is not negative and decreasing at R_cert = {r_cert} \
             (growth: {:.3e}, {:.3e}; coefficients: {:.3e}, {:.3e}); use a larger R_cert",
            g1.0, g2.0, c1.0, c2.0
        )));
    };
    if !(profile.value(2.0 * r_cert) > profile.value(r_cert)) {
        return Err(Error::Certification("υ does not grow beyond R_cert".into()));
    }

    let hypotheses_pass = check_hypotheses(field, params, grid, grid.directions()).pass;
    Ok(StaticLyapunov {
        profile,
        delta,
        m_bound,
        r_cert,
        tail: TailCertificate {
            route,
            radius: r_cert,
            growth_bracket: (g1.0, g2.0),
            growth_bracket_reduced: (g1.1, g2.1),
            coefficient_bracket: (c1.0, c2.0),
            coefficient_bracket_reduced: (c1.1, c2.1),
        },
        hypotheses_pass,
        grid: grid.spec(),
    })
}

/// The rate `h(s)` of a time-dependent Lyapunov function.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum RateFunction {
    /// Piecewise constant: `values[j]` on `[nodes[j], nodes[j+1])`.
    Empirical { nodes: Vec<f64>, values: Vec<f64>, safety: f64 },
    /// `constant · (horizon − s)^exponent`.
    Analytic { constant: f64, exponent: f64, horizon: f64 },
}

impl RateFunction {
    pub fn zero(horizon: f64) -> Self {
        RateFunction::Analytic { constant: 0.0, exponent: 0.0, horizon }
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            RateFunction::Empirical { nodes, values, .. } => {
                if values.is_empty() {
                    return 0.0;
                }
                let idx = nodes.partition_point(|n| *n <= s);
                values[idx.saturating_sub(1).min(values.len() - 1)]
            }
            RateFunction::Analytic { constant, exponent, horizon } => {
                if *constant == 0.0 {
                    0.0
                } else {
                    constant * (horizon - s).powf(*exponent)
                }
            }
        }
    }

    /// `∫_a^b h`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match self {
            RateFunction::Empirical { nodes, values, .. } => {
                let mut acc = 0.0;
                for (j, v) in values.iter().enumerate() {
                    let lo = if j == 0 { f64::NEG_INFINITY } else { nodes[j] };
                    let hi = nodes[j + 1];
                    let overlap = hi.min(b) - lo.max(a);
                    if overlap > 0.0 {
                        acc += v * overlap;
                    }
                }
                acc
            }
            RateFunction::Analytic { constant, exponent, horizon } => {
                if *constant == 0.0 {
                    return 0.0;
                }
                let e1 = exponent + 1.0;
                if e1 <= 0.0 {
                    return f64::INFINITY;
                }
                constant * ((horizon - a).powf(e1) - (horizon - b).max(0.0).powf(e1)) / e1
            }
        }
    }

    /// `(s, h(s))` at the nodes (empirical) or on a uniform mesh (analytic).
    pub fn samples(&self, n: usize) -> Vec<(f64, f64)> {
        match self {
            RateFunction::Empirical { nodes, values, .. } => {
                nodes.iter().take(values.len()).zip(values).map(|(s, v)| (*s, *v)).collect()
            }
            RateFunction::Analytic { horizon, .. } => (0..n)
                .map(|i| {
                    let s = horizon * i as f64 / n as f64;
                    (s, self.eval(s))
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeDependentLyapunov {
    pub profile: RadialProfile,
    pub delta: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub horizon: f64,
    pub rate: RateFunction,
    /// `α − (2β+m−2)/(β+m−2)`, the power of `(t−s)` in the analytic rate.
    pub analytic_exponent: f64,
    /// Smallest `C` with `C(t−s)^γ` above the grid suprema.
    pub analytic_constant_fit: f64,
    pub m_bound: f64,
    pub r_cert: f64,
}

impl TimeDependentLyapunov {
    /// A Lyapunov weight with a caller-chosen rate (e.g. the analytic form).
    pub fn with_rate(&self, rate: RateFunction) -> Self {
        Self { rate, ..self.clone() }
    }

    /// `ε(t−s)^α`.
    pub fn rate_coefficient(&self, s: f64) -> f64 {
        let tau = (self.horizon - s).max(0.0);
        self.epsilon * tau.powf(self.alpha)
    }

    pub fn at(&self, s: f64) -> ExpRadialFn {
        ExpRadialFn::new(self.profile, self.rate_coefficient(s))
    }

    /// `∂_s W / W = −εα(t−s)^{α−1} υ(x)`.
    pub fn ds_ratio(&self, s: f64, x: &[f64]) -> f64 {
        let tau = (self.horizon - s).max(0.0);
        if tau == 0.0 && self.alpha >= 1.0 {
            return if self.alpha == 1.0 { -self.epsilon * self.profile.value_at(x) } else { 0.0 };
        }
        -self.epsilon * self.alpha * tau.powf(self.alpha - 1.0) * self.profile.value_at(x)
    }

    pub fn log_value(&self, s: f64, x: &[f64]) -> f64 {
        self.rate_coefficient(s) * self.profile.value_at(x)
    }

    pub fn value(&self, s: f64, x: &[f64]) -> f64 {
        self.log_value(s, x).exp()
    }

    pub fn h(&self, s: f64) -> f64 {
        self.rate.eval(s)
    }

    pub fn h_integral(&self, a: f64, b: f64) -> f64 {
        self.rate.integral(a, b)
    }
}

impl SpaceTimeWeight for TimeDependentLyapunov {
    fn log_value(&self, s: f64, x: &[f64]) -> f64 {
        TimeDependentLyapunov::log_value(self, s, x)
    }
}

/// `(∂_sW − A W)/W` and `(∂_sW − ηΔW − F·∇W)/W` at `(s, x)`.
pub fn lyapunov_residuals(
    w: &TimeDependentLyapunov,
    field: &CoefficientField,
    s: f64,
    x: &[f64],
) -> Result<(f64, f64)> {
    let ratio = generator_ratio(field, &w.at(s), s, x)?;
    let ds = w.ds_ratio(s, x);
    Ok((ds - ratio.full, ds - ratio.reduced))
}

/// Empirical safety factor applied to grid suprema of the rate.
pub const RATE_SAFETY: f64 = 1.05;

/// Builds `W` with `ε = eps_frac·δ` and its empirical rate on `grid`.
#[allow(clippy::too_many_arguments)]
pub fn derive_time_dependent(
    stat: &StaticLyapunov,
    field: &CoefficientField,
    params: &GrowthParams,
    horizon: f64,
    eps_frac: f64,
    alpha: f64,
    grid: &ShellGrid,
) -> Result<TimeDependentLyapunov> {
    if !(horizon > 0.0 && horizon <= 1.0) {
        return Err(Error::domain(format!("horizon t = {horizon} must lie in (0, 1]")));
    }
    open_unit_fraction("eps_frac", eps_frac)?;
    let threshold = params.alpha_threshold();
    if !(alpha > threshold) {
        return Err(Error::domain(format!("alpha = {alpha} must exceed (p+1-m)/(p-1) = {threshold}")));
    }
    let beta = params.beta();
    let m = params.m;
    let analytic_exponent = alpha - (2.0 * beta + m - 2.0) / (beta + m - 2.0);

    let mut w = TimeDependentLyapunov {
        profile: stat.profile,
        delta: stat.delta,
        epsilon: eps_frac * stat.delta,
        alpha,
        horizon,
        rate: RateFunction::zero(horizon),
        analytic_exponent,
        analytic_constant_fit: 0.0,
        m_bound: stat.m_bound,
        r_cert: stat.r_cert,
    };

    let mut nodes: Vec<f64> = grid.times().iter().copied().filter(|s| *s < horizon).collect();
    nodes.sort_by(f64::total_cmp);
    nodes.dedup();
    let include_endpoint = alpha >= 1.0;
    let mut eval_times = nodes.clone();
    if include_endpoint {
        eval_times.push(horizon);
    }
    let points = grid.points();
    let sups: Vec<Result<f64>> = eval_times
        .par_iter()
        .map(|&s| {
            let mut best = 0.0_f64;
            for x in &points {
                let (full, reduced) = lyapunov_residuals(&w, field, s, x)?;
                best = best.max(-full).max(-reduced);
            }
            Ok(best)
        })
        .collect();
    let sups: Vec<f64> = sups.into_iter().collect::<Result<_>>()?;

    let mut values = Vec::with_capacity(nodes.len());
    for j in 0..nodes.len() {
        let next = sups.get(j + 1).copied().unwrap_or(sups[j]);
        values.push(RATE_SAFETY * sups[j].max(next));
    }
    let mut all_nodes = nodes.clone();
    all_nodes.push(horizon);

    w.analytic_constant_fit =
        nodes.iter().zip(&sups).map(|(s, sup)| sup / (horizon - s).powf(analytic_exponent)).fold(0.0, f64::max);
    w.rate = RateFunction::Empirical { nodes: all_nodes, values, safety: RATE_SAFETY };
    Ok(w)
}

/// Which of the two defining inequalities a violation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovInequality {
    Generator,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovViolation {
    pub s: f64,
    pub x: Vec<f64>,
    pub inequality: LyapunovInequality,
    /// `(∂_sW − ·)/W + h(s)`; negative.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovParameters {
    pub beta: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub horizon: f64,
    pub m_bound: f64,
    pub r_cert: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovCertificate {
    pub parameters: LyapunovParameters,
    pub rate_form: String,
    pub checked_nodes: usize,
    pub violation_count: usize,
    /// Worst violations first, at most [`MAX_LISTED_VIOLATIONS`].
    pub violations: Vec<LyapunovViolation>,
    pub h_integral: f64,
    pub grid: GridSpec,
}

pub const MAX_LISTED_VIOLATIONS: usize = 200;

impl LyapunovCertificate {
    pub fn pass(&self) -> bool {
        self.violation_count == 0
    }
}

/// Checks `∂_sW − A W ≥ −hW` and `∂_sW − (ηΔ + F·∇)W ≥ −hW` on the grid.
pub fn verify_lyapunov(
    w: &TimeDependentLyapunov,
    field: &CoefficientField,
    grid: &ShellGrid,
) -> Result<LyapunovCertificate> {
    let points = grid.points();
    let times: Vec<f64> = grid.times().iter().copied().filter(|s| *s <= w.horizon).collect();
    let per_slice: Vec<Result<(usize, Vec<LyapunovViolation>)>> = times
        .par_iter()
        .map(|&s| {
            let h = w.h(s);
            let mut count = 0;
            let mut found = Vec::new();
            for x in &points {
                let (full, reduced) = lyapunov_residuals(w, field, s, x)?;
                for (g, which) in [(full, LyapunovInequality::Generator), (reduced, LyapunovInequality::Reduced)] {
                    let margin = g + h;
                    if margin < -1e-12 * g.abs().max(1.0) {
                        count += 1;
                        found.push(LyapunovViolation { s, x: x.clone(), inequality: which, margin });
                    }
                }
            }
            Ok((count, found))
        })
        .collect();
    let mut violation_count = 0;
    let mut violations = Vec::new();
    for slice in per_slice {
        let (c, mut v) = slice?;
        violation_count += c;
        violations.append(&mut v);
    }
    violations.sort_by(|a, b| a.margin.total_cmp(&b.margin));
    violations.truncate(MAX_LISTED_VIOLATIONS);
    let rate_form = match w.rate {
        RateFunction::Empirical { .. } => "empirical",
        RateFunction::Analytic { .. } => "analytic",
    };
    Ok(LyapunovCertificate {
        parameters: LyapunovParameters {
            beta: w.profile.beta,
            delta: w.delta,
            epsilon: w.epsilon,
            alpha: w.alpha,
            horizon: w.horizon,
            m_bound: w.m_bound,
            r_cert: w.r_cert,
        },
        rate_form: rate_form.into(),
        checked_nodes: times.len() * points.len(),
        violation_count,
        violations,
        h_integral: w.h_integral(0.0, w.horizon),
        grid: grid.spec(),
    })
}

/// Writes `(s, h)` pairs as CSV.
pub fn write_rate_csv<W: std::io::Write>(out: W, rate: &RateFunction) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["s", "h"])?;
    for (s, h) in rate.samples(200) {
        wtr.write_record([s.to_string(), h.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator_model::{brownian, make_polynomial, BaseDiffusion, CoercivityRate};

    fn example_params() -> GrowthParams {
        GrowthParams::new(0.0, 3.0, 1.0, 1.0, 1.0, CoercivityRate::constant(1.0)).unwrap()
    }

    fn example_field() -> CoefficientField {
        make_polynomial(1, &example_params(), BaseDiffusion::scaled_identity(1, 1.0)).unwrap()
    }

    #[test]
    fn profile_coefficients() {
        let p4 = smooth_radial_power(4.0).unwrap();
        assert_eq!((p4.a, p4.b_c, p4.c), (0.0, 0.0, 1.0));
        let p2 = smooth_radial_power(2.0).unwrap();
        assert_eq!((p2.a, p2.b_c, p2.c), (0.0, 1.0, 0.0));
        let p1 = smooth_radial_power(1.0).unwrap();
        assert_eq!((p1.a, p1.b_c, p1.c), (0.375, 0.75, -0.125));
        assert_eq!(p1.value(0.0), 0.375);
        assert!(smooth_radial_power(0.0).is_err());
        assert!(smooth_radial_power(-1.0).is_err());
    }

    #[test]
    fn profile_is_c2_at_unit_sphere() {
        for beta in [0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.5] {
            let p = smooth_radial_power(beta).unwrap();
            let inner = p.derivatives(1.0 - 1e-12);
            let outer = p.derivatives(1.0);
            assert!((inner.value - outer.value).abs() < 1e-10);
            assert!((inner.d1 - outer.d1).abs() < 1e-10);
            assert!((inner.d2 - outer.d2).abs() < 1e-10);
            assert_eq!(p.inner_minimum() < 0.0, beta > 2.0 && beta < 4.0, "beta={beta}");
        }
    }

    #[test]
    fn generator_closed_form_examples() {
        let f = example_field();
        let v = ExpRadialFn::new(smooth_radial_power(4.0).unwrap(), 0.2);
        let av = apply_generator(&f, &v, 0.0, &[1.0]).unwrap();
        assert!((av - 0.8 * 2.8 * 0.2f64.exp()).abs() < 1e-12);
        assert!((av - 2.736).abs() < 1e-3);

        let bm = brownian(3, 1.0);
        let v2 = ExpRadialFn::new(smooth_radial_power(2.0).unwrap(), 0.1);
        assert!((apply_generator(&bm, &v2, 0.0, &[0.0, 0.0, 0.0]).unwrap() - 0.6).abs() < 1e-15);
        let x = [0.5, -1.0, 2.0];
        let r2: f64 = 0.25 + 1.0 + 4.0;
        let expected = (2.0 * 0.1 * 3.0 + 4.0 * 0.01 * r2) * (0.1 * r2).exp();
        assert!((apply_generator(&bm, &v2, 0.0, &x).unwrap() - expected).abs() < 1e-12 * expected);

        let one = ExpRadialFn::new(smooth_radial_power(4.0).unwrap(), 0.0);
        assert_eq!(apply_generator(&f, &one, 0.3, &[2.0]).unwrap(), 0.0);
    }

    #[test]
    fn static_lyapunov_ranges() {
        let params = example_params();
        let grid = ShellGrid::uniform(1, 0.0, 1.0, 0.25, 10.0, 0.05).unwrap();
        let v = derive_static(&example_field(), &params, 0.8, &grid).unwrap();
        assert!((v.delta - 0.2).abs() < 1e-15);
        assert!(v.delta * 4.0 < params.kappa);
        assert!(v.m_bound > 0.0);
        assert!(derive_static(&example_field(), &params, 1.0, &grid).is_err());
        assert!(derive_static(&example_field(), &params, 0.0, &grid).is_err());

        let p2 = GrowthParams::new(2.0, 3.0, 1.0, 1.0, 1.0, CoercivityRate::constant(1.0)).unwrap();
        let f2 = make_polynomial(1, &p2, BaseDiffusion::scaled_identity(1, 1.0)).unwrap();
        let v2 = derive_static(&f2, &p2, 0.8, &grid).unwrap();
        assert!((v2.delta - 0.4).abs() < 1e-15);
        assert_eq!(v2.tail.route, TailRoute::GrowthBracket);
    }

    #[test]
    fn tail_failure_requests_larger_radius() {
        let params = example_params();
        let grid = ShellGrid::uniform(1, 0.0, 1.0, 0.5, 1.0, 0.5).unwrap();
        match derive_static(&example_field(), &params, 0.8, &grid) {
            Err(Error::Certification(msg)) => assert!(msg.contains("larger R_cert")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn alpha_threshold_enforced() {
        let params = example_params();
        let grid = ShellGrid::uniform(1, 0.0, 0.9, 0.1, 5.0, 0.1).unwrap();
        let f = example_field();
        let v = derive_static(&f, &params, 0.8, &grid).unwrap();
        assert!(derive_time_dependent(&v, &f, &params, 1.0, 0.5, 2.0, &grid).is_err());
        let w = derive_time_dependent(&v, &f, &params, 1.0, 0.5, 2.5, &grid).unwrap();
        assert!((w.epsilon - 0.1).abs() < 1e-15);
        for x in [[0.0], [0.7], [3.0], [-5.0]] {
            assert_eq!(w.value(1.0, &x), 1.0);
            for s in [0.0, 0.3, 0.9] {
                assert!(w.log_value(s, &x) <= v.log_value(&x) * (w.epsilon / w.delta) + 1e-15);
                assert!(w.value(s, &x) <= v.value(&x));
                assert!(w.ds_ratio(s, &x) <= 0.0);
            }
        }
    }

    #[test]
    fn empirical_rate_certifies_its_grid() {
        let params = example_params();
        let f = example_field();
        let grid = ShellGrid::uniform(1, 0.0, 0.95, 0.05, 6.0, 0.1).unwrap();
        let v = derive_static(&f, &params, 0.8, &grid).unwrap();
        let w = derive_time_dependent(&v, &f, &params, 1.0, 0.5, 2.5, &grid).unwrap();
        let cert = verify_lyapunov(&w, &f, &grid).unwrap();
        assert_eq!(cert.violation_count, 0);
        assert!(cert.h_integral.is_finite() && cert.h_integral > 0.0);
    }

    #[test]
    fn zero_rate_fails_near_origin() {
        let params = example_params();
        let f = example_field();
        let grid = ShellGrid::uniform(1, 0.0, 0.9, 0.1, 1.0, 0.05).unwrap();
        let big = ShellGrid::uniform(1, 0.0, 0.9, 0.1, 10.0, 0.05).unwrap();
        let v = derive_static(&f, &params, 0.8, &big).unwrap();
        let w = derive_time_dependent(&v, &f, &params, 1.0, 0.5, 2.5, &grid).unwrap();
        let w0 = w.with_rate(RateFunction::zero(1.0));
        let cert = verify_lyapunov(&w0, &f, &grid).unwrap();
        assert!(cert.violation_count > 0);
    }

    #[test]
    fn zero_rate_holds_in_far_region() {
        // For this field the residual is positive once
        // 4τr²(1−4u) > α + 12τ/r², which the (t−s)^{-1/2} shell below ensures.
        let params = example_params();
        let f = example_field();
        let big = ShellGrid::uniform(1, 0.0, 0.9, 0.1, 10.0, 0.05).unwrap();
        let v = derive_static(&f, &params, 0.8, &big).unwrap();
        let w = derive_time_dependent(&v, &f, &params, 1.0, 0.5, 2.5, &big).unwrap();
        let alpha: f64 = 2.5;
        for s in [0.0, 0.3, 0.6, 0.9] {
            let tau = 1.0 - s;
            let r0 = (2.0 * alpha / (2.4 * tau)).sqrt().max(5f64.sqrt());
            for i in 0..200 {
                let r = r0 + 0.05 * i as f64;
                for x in [[r], [-r]] {
                    let (full, reduced) = lyapunov_residuals(&w, &f, s, &x).unwrap();
                    assert!(full >= 0.0 && reduced >= 0.0, "s={s} r={r}: {full} {reduced}");
                }
            }
        }
    }

    #[test]
    fn analytic_rate_integral() {
        let rate = RateFunction::Analytic { constant: 2.0, exponent: -0.5, horizon: 1.0 };
        assert!((rate.integral(0.0, 1.0) - 4.0).abs() < 1e-14);
        let emp = RateFunction::Empirical { nodes: vec![0.0, 0.5, 1.0], values: vec![1.0, 3.0], safety: 1.0 };
        assert_eq!(emp.eval(0.2), 1.0);
        assert_eq!(emp.eval(0.5), 3.0);
        assert!((emp.integral(0.25, 1.0) - 1.75).abs() < 1e-15);
    }
}
