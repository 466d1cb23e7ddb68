//! Weighted density bounds: the weight system `(w, W₁, W₂)` and its
//! constants `c₁…c₈`, the six-term bound right-hand side, and the kernel
//! envelope `C̃[(t−s)^{e₁} + (t−s)^{e₂}] exp(−δ₀(t−s)^α|y|^β)`.

use serde::Serialize;

use crate::density_lab::{DensityField, SpaceGrid};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ShellGrid};
use crate::linalg;
use crate::lyapunov::{RadialProfile, StaticLyapunov};
use crate::operator_model::{CoefficientField, GrowthParams};

fn positive_part(x: f64) -> f64 {
    x.max(0.0)
}

/// `(e₁, e₂) = (1 − αk(p∨m)/β, 2 − αk(p+(m−1)₊)/β)`.
pub fn envelope_exponents(p: f64, m: f64, alpha: f64, k: f64, d: usize) -> Result<(f64, f64)> {
    if !(p > (m - 1.0).max(1.0)) {
        return Err(Error::domain(format!("p = {p} must exceed max(m − 1, 1) = {}", (m - 1.0).max(1.0))));
    }
    let beta = p + 1.0 - m;
    let threshold = beta / (p - 1.0);
    if !(alpha > threshold) {
        return Err(Error::domain(format!("alpha = {alpha} must exceed (p+1−m)/(p−1) = {threshold}")));
    }
    if !(k > d as f64 + 2.0) {
        return Err(Error::domain(format!("k = {k} must exceed d + 2 = {}", d + 2)));
    }
    let e1 = 1.0 - alpha * k * p.max(m) / beta;
    let e2 = 2.0 - alpha * k * (p + positive_part(m - 1.0)) / beta;
    Ok((e1, e2))
}

/// Spatial/temporal shape of a kernel bound, without its constant.
pub trait EnvelopeShape {
    fn log_shape(&self, gap: f64, y: &[f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelEnvelope {
    pub delta0: f64,
    pub alpha: f64,
    pub k: f64,
    pub p: f64,
    pub m: f64,
    pub beta: f64,
    pub e1: f64,
    pub e2: f64,
    pub c_tilde: f64,
    /// Time gap on which `c_tilde` was fitted, if it was.
    pub fitted_on_gap: Option<f64>,
}

/// Default `δ₀` fraction of its supremum `κ/(Λβ)`.
pub const DELTA0_FRAC: f64 = 0.8;

impl KernelEnvelope {
    pub fn new(params: &GrowthParams, d: usize, delta0: f64, alpha: f64, k: f64) -> Result<Self> {
        params.validate()?;
        let (e1, e2) = envelope_exponents(params.p, params.m, alpha, k, d)?;
        let beta = params.beta();
        let sup = params.kappa / (params.lambda * beta);
        if !(delta0 > 0.0 && delta0 < sup) {
            return Err(Error::domain(format!("delta0 = {delta0} must lie in (0, κ/(Λβ)) = (0, {sup})")));
        }
        Ok(Self { delta0, alpha, k, p: params.p, m: params.m, beta, e1, e2, c_tilde: 1.0, fitted_on_gap: None })
    }

    pub fn with_default_delta0(params: &GrowthParams, d: usize, alpha: f64, k: f64) -> Result<Self> {
        let delta0 = DELTA0_FRAC * params.kappa / (params.lambda * params.beta());
        Self::new(params, d, delta0, alpha, k)
    }

    pub fn prefactor(&self, gap: f64) -> f64 {
        gap.powf(self.e1) + gap.powf(self.e2)
    }

    /// `δ₀ gap^α`, the decay rate in `|y|^β`.
    pub fn rate(&self, gap: f64) -> f64 {
        self.delta0 * gap.powf(self.alpha)
    }
}

impl EnvelopeShape for KernelEnvelope {
    fn log_shape(&self, gap: f64, y: &[f64]) -> f64 {
        self.prefactor(gap).ln() - self.rate(gap) * linalg::norm(y).powf(self.beta)
    }
}

/// `C̃[(t−s)^{e₁}+(t−s)^{e₂}] exp(−δ₀(t−s)^α|y|^β)`.
pub fn eval_envelope(env: &KernelEnvelope, t: f64, s: f64, y: &[f64]) -> Result<f64> {
    if !(s < t) || !(s > 0.0) || t > 1.0 {
        return Err(Error::domain(format!("need 0 < s < t ≤ 1, got s = {s}, t = {t}")));
    }
    let gap = t - s;
    Ok(env.c_tilde * env.prefactor(gap) * (-env.rate(gap) * linalg::norm(y).powf(env.beta)).exp())
}

/// `0 < a₀ < a < b < b₀ < t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Window {
    pub a0: f64,
    pub a: f64,
    pub b: f64,
    pub b0: f64,
    pub t: f64,
}

impl Window {
    pub fn validate(&self) -> Result<()> {
        let Window { a0, a, b, b0, t } = *self;
        if 0.0 < a0 && a0 < a && a < b && b < b0 && b0 < t && t <= 1.0 {
            Ok(())
        } else {
            Err(Error::domain(format!("window must satisfy 0 < a0 < a < b < b0 < t ≤ 1, got {self:?}")))
        }
    }
}

/// `a₀ = max{s − (t−s)/2, s/2}`, `b = s + (t−s)/3`, `b₀ = s + (t−s)/2`,
/// and `a = (a₀ + s)/2` so that `s ∈ (a, b)`.
pub fn canonical_window(s: f64, t: f64) -> Result<Window> {
    if !(0.0 < s && s < t && t <= 1.0) {
        return Err(Error::domain(format!("need 0 < s < t ≤ 1, got s = {s}, t = {t}")));
    }
    let gap = t - s;
    let a0 = (s - gap / 2.0).max(s / 2.0);
    Ok(Window { a0, a: 0.5 * (a0 + s), b: s + gap / 3.0, b0: s + gap / 2.0, t })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightConstant {
    pub index: usize,
    pub value: f64,
    /// Largest grid value of the defining ratio.
    pub grid_sup: f64,
    pub location: Option<(f64, Vec<f64>)>,
    pub r_exponent: f64,
    /// `c_bar = value · (t − b₀)^{r}`.
    pub c_bar: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightSystem {
    pub epsilons: [f64; 3],
    pub k: f64,
    pub alpha: f64,
    pub delta: f64,
    pub window: Window,
    pub constants: Vec<WeightConstant>,
    pub c0: f64,
    pub sigma: f64,
    pub profile: RadialProfile,
    pub grid: GridSpec,
}

impl WeightSystem {
    /// `[c₁, …, c₈]`.
    pub fn values(&self) -> [f64; 8] {
        let mut out = [0.0; 8];
        for (o, c) in out.iter_mut().zip(&self.constants) {
            *o = c.value;
        }
        out
    }

    pub fn weight_log(&self, which: usize, s: f64, x: &[f64]) -> f64 {
        let tau = (self.window.t - s).max(0.0);
        self.epsilons[which] * tau.powf(self.alpha) * self.profile.value_at(x)
    }
}

/// `r₁…r₈` of the decomposition `c_j = c̄_j (t−b₀)^{−r_j}`.
pub fn r_exponents(alpha: f64, m: f64, p: f64, k: f64) -> [f64; 8] {
    let beta = p + 1.0 - m;
    let r2 = alpha * positive_part(m - 1.0) / beta;
    [0.0, r2, alpha * positive_part(m - 2.0) / beta, 1.0, alpha * m / beta, alpha * k * p / beta, 0.0, r2]
}

/// The canonical rates `ε₀ = δ/2`, `ε₂ = 0.9δ`, `ε₁ = ε₀ + (ε₂−ε₀)/(2k)`.
pub fn canonical_epsilons(delta: f64, k: f64) -> [f64; 3] {
    let e0 = 0.5 * delta;
    let e2 = 0.9 * delta;
    [e0, e0 + 0.5 * (e2 - e0) / k, e2]
}

struct RadialLogs {
    grad: Vec<f64>,
    hess_trace_q: f64,
    laplacian: f64,
}

/// Derivatives of `ℓ = u·υ(x)`: gradient, `Tr(Q D²ℓ)` and `Δℓ`.
fn radial_logs(profile: &RadialProfile, u: f64, x: &[f64], q: &[f64]) -> RadialLogs {
    let d = x.len();
    let r = linalg::norm(x);
    let der = profile.derivatives(r);
    let tr = linalg::trace(q, d);
    if r == 0.0 {
        return RadialLogs { grad: vec![0.0; d], hess_trace_q: u * der.d2 * tr, laplacian: u * der.d2 * d as f64 };
    }
    let unit: Vec<f64> = x.iter().map(|c| c / r).collect();
    let qhat = linalg::quad_form(q, d, &unit);
    RadialLogs {
        grad: unit.iter().map(|e| u * der.d1 * e).collect(),
        hess_trace_q: u * (der.d2 * qhat + der.d1_over_r * (tr - qhat)),
        laplacian: u * (der.d2 + der.d1_over_r * (d as f64 - 1.0)),
    }
}

/// Grid suprema of the eight defining ratios over `[a₀, b₀] × grid`.
#[allow(clippy::too_many_arguments)]
pub fn weight_constants(
    field: &CoefficientField,
    params: &GrowthParams,
    lyap: &StaticLyapunov,
    alpha: f64,
    epsilons: [f64; 3],
    k: f64,
    window: Window,
    grid: &ShellGrid,
) -> Result<WeightSystem> {
    window.validate()?;
    let [e0, e1, e2] = epsilons;
    let delta = lyap.delta;
    if !(0.0 < e0 && e0 < e1 && e1 < e2 && e2 < delta) {
        return Err(Error::domain(format!("need 0 < ε0 < ε1 < ε2 < δ = {delta}, got {epsilons:?}")));
    }
    if !(k * (e1 - e0) < e2 - e0) {
        return Err(Error::domain(format!("need k(ε1 − ε0) < ε2 − ε0, got k = {k}, ε = {epsilons:?}")));
    }
    let d = field.dim();
    if !(k > d as f64 + 2.0) {
        return Err(Error::domain(format!("k = {k} must exceed d + 2 = {}", d + 2)));
    }
    let profile = lyap.profile;
    let times: Vec<f64> = grid.times().iter().copied().filter(|s| *s >= window.a0 && *s <= window.b0).collect();
    if times.is_empty() {
        return Err(Error::Input(format!("grid has no time nodes in [{}, {}]", window.a0, window.b0)));
    }
    let points = grid.points();
    let sigma = 1.0 - e2 / delta;

    let mut sup = [0.0_f64; 8];
    let mut at: [Option<(f64, Vec<f64>)>; 8] = Default::default();
    let mut c0_log = f64::NEG_INFINITY;
    let mut q = vec![0.0; d * d];
    let mut f = vec![0.0; d];
    let mut qg = vec![0.0; d];
    for &s in &times {
        let tau = window.t - s;
        let ta = tau.powf(alpha);
        for x in &points {
            field.diffusion_into(s, x, &mut q);
            field.drift_into(s, x, &mut f);
            let ups = profile.value_at(x);
            let (lw, l1, l2) = (e0 * ta * ups, e1 * ta * ups, e2 * ta * ups);
            let w = radial_logs(&profile, e0 * ta, x, &q);
            let w1 = radial_logs(&profile, e1 * ta, x, &q);
            linalg::mat_vec(&q, d, &w.grad, &mut qg);
            let q_grad_w = linalg::norm(&qg);
            let grad_sq = linalg::dot(&w.grad, &w.grad);
            let grad_q_grad = linalg::quad_form(&q, d, &w.grad);
            linalg::mat_vec(&q, d, &w1.grad, &mut qg);
            let q_grad_w1 = linalg::norm(&qg);
            let div: Vec<f64> = (0..d).map(|j| field.spatial_divergence(s, x, j)).collect::<Result<_>>()?;
            let ds = e0 * alpha * tau.powf(alpha - 1.0) * ups;

            let ratios = [
                (lw - l1).exp(),
                q_grad_w * ((lw - l1) / k).exp(),
                (w.hess_trace_q + grad_q_grad).abs() * (2.0 * (lw - l1) / k).exp(),
                ds.abs() * (2.0 * (lw - l1) / k).exp(),
                linalg::norm(&div) * ((lw - l2) / k).exp(),
                linalg::norm(&f).powf(k) * (lw - l2).exp(),
                (w.laplacian + grad_sq).abs() * (2.0 * (lw - l1) / k).exp(),
                q_grad_w1 * (l1 - lw + (lw - l2) / k).exp(),
            ];
            for (j, r) in ratios.iter().enumerate() {
                if !r.is_finite() {
                    return Err(Error::Evaluation { what: format!("ratio for c{}", j + 1), t: s, x: x.clone() });
                }
                if *r > sup[j] || at[j].is_none() {
                    sup[j] = sup[j].max(*r);
                    at[j] = Some((s, x.clone()));
                }
            }
            c0_log = c0_log.max(l2 - (1.0 - sigma) * delta * ups);
        }
    }

    let r = r_exponents(alpha, params.m, params.p, k);
    let scale = window.t - window.b0;
    let constants = (0..8)
        .map(|j| {
            // w ≤ W₁ by construction, which fixes c₁ = 1.
            let value = if j == 0 { 1.0 } else { sup[j] };
            WeightConstant {
                index: j + 1,
                value,
                grid_sup: sup[j],
                location: at[j].clone(),
                r_exponent: r[j],
                c_bar: value * scale.powf(r[j]),
            }
        })
        .collect();
    Ok(WeightSystem {
        epsilons,
        k,
        alpha,
        delta,
        window,
        constants,
        c0: c0_log.exp().max(1.0),
        sigma,
        profile,
        grid: grid.spec(),
    })
}

/// `(c̃₂, c̃₃, c̃₅) = (2c₂, c₃ + ηc₇, c₅ + 4c₁c₈)`.
pub fn localized_constants(c: &[f64; 8], eta: f64) -> (f64, f64, f64) {
    (2.0 * c[1], c[2] + eta * c[6], c[4] + 4.0 * c[0] * c[7])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    pub c: [f64; 8],
    pub k: f64,
    /// `b₀ − b`.
    pub b0_minus_b: f64,
    pub sup_zeta1: f64,
    pub int_zeta1: f64,
    pub int_zeta2: f64,
    /// The universal constant in front of the bracket.
    pub big_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundRhs {
    pub terms: [f64; 6],
    pub total: f64,
}

/// The six-term bound on `wρ` over `(a, b) × ℝ^d`.
pub fn general_bound_rhs(inp: &BoundInputs) -> Result<BoundRhs> {
    let BoundInputs { c, k, b0_minus_b, sup_zeta1, int_zeta1, int_zeta2, big_c } = *inp;
    if !(b0_minus_b > 0.0) {
        return Err(Error::domain("need b0 > b"));
    }
    if c.iter().chain([&sup_zeta1, &int_zeta1, &int_zeta2, &big_c]).any(|v| !(*v >= 0.0)) {
        return Err(Error::domain("bound inputs must be nonnegative"));
    }
    let [c1, c2, c3, c4, c5, c6, c7, c8] = c;
    let inv = 1.0 / b0_minus_b;
    let terms = [
        c1 * sup_zeta1,
        ((c1 * c8).powf(k) + c2.powf(k) + c5.powf(k) + c6) * int_zeta2,
        (k.powf(k) * c1 * c1 * inv.powf(k) + c2.powf(2.0 * k) + c3.powf(k) + c4.powf(k) + c7.powf(k))
            * int_zeta1
            * int_zeta1,
        c2.powf(k) * c6 * int_zeta2 * int_zeta2,
        c2 * c2 * c6.powf(2.0 / k) * int_zeta2.powf(4.0 / k),
        (k * k * c1.powf(4.0 / k) * inv * inv + c2.powi(4) + c3 * c3 + c4 * c4 + c7 * c7) * int_zeta1.powf(4.0 / k),
    ];
    let terms = terms.map(|t| big_c * t);
    let total = terms.iter().sum();
    Ok(BoundRhs { terms, total })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailFit {
    pub delta_hat: f64,
    pub intercept: f64,
    /// RMS residual of `log ρ`.
    pub residual: f64,
    pub points: usize,
    pub r0: f64,
}

pub const TAIL_FLOOR: f64 = 1e-300;

/// Least-squares fit of `log ρ ≈ intercept − δ̂|y|^β` over `|y| ≥ r₀`. By
/// default `r₀` is the smallest radius where `ρ` is three decades below
/// its peak.
pub fn fit_tail_decay(grid: &SpaceGrid, slice: &[f64], beta: f64, r0: Option<f64>) -> Result<TailFit> {
    let peak = slice.iter().copied().fold(0.0, f64::max);
    let radius: Vec<f64> = (0..grid.len()).map(|i| linalg::norm(&grid.point(i))).collect();
    let r0 = match r0 {
        Some(r) => r,
        None => {
            slice.iter().zip(&radius).filter(|(v, _)| **v <= 1e-3 * peak).map(|(_, r)| *r).fold(f64::INFINITY, f64::min)
        }
    };
    let pts: Vec<(f64, f64)> = slice
        .iter()
        .zip(&radius)
        .filter(|(v, r)| **r >= r0 && **v > TAIL_FLOOR)
        .map(|(v, r)| (-r.powf(beta), v.ln()))
        .collect();
    if pts.len() < 8 {
        return Err(Error::Input(format!("only {} usable tail points beyond r0 = {r0}", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Input("tail points share a single radius".into()));
    }
    let delta_hat = sxy / sxx;
    let intercept = my - delta_hat * mx;
    let ss: f64 = pts.iter().map(|p| (p.1 - intercept - delta_hat * p.0).powi(2)).sum();
    Ok(TailFit { delta_hat, intercept, residual: (ss / n).sqrt(), points: pts.len(), r0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapDomination {
    pub gap: f64,
    /// `max ρ / (C̃ · shape)` over nodes with `ρ > 0`.
    pub max_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominationReport {
    pub c_tilde: f64,
    pub fit_gap: f64,
    pub factor: f64,
    pub gaps: Vec<GapDomination>,
    pub pass: bool,
}

fn max_log_ratio(grid: &SpaceGrid, slice: &[f64], gap: f64, env: &dyn EnvelopeShape) -> f64 {
    slice
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, v)| v.ln() - env.log_shape(gap, &grid.point(i)))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Fits `C̃` on the largest time gap and checks `ρ ≤ factor · C̃ · shape`
/// on every slice of every density.
pub fn verify_envelope_domination(
    densities: &[&DensityField],
    env: &dyn EnvelopeShape,
    factor: f64,
) -> Result<DominationReport> {
    let mut slices: Vec<(f64, &SpaceGrid, &[f64])> = Vec::new();
    for d in densities {
        for j in 0..d.starts.len() {
            slices.push((d.gap(j), &d.grid, d.slice(j)));
        }
    }
    if slices.is_empty() {
        return Err(Error::Input("no density slices supplied".into()));
    }
    slices.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (fit_gap, fit_grid, fit_slice) = slices[slices.len() - 1];
    let log_c = max_log_ratio(fit_grid, fit_slice, fit_gap, env);
    if !log_c.is_finite() {
        return Err(Error::Input("fitting slice has no positive values".into()));
    }
    let gaps: Vec<GapDomination> = slices
        .iter()
        .map(|(gap, grid, slice)| {
            let max_ratio = (max_log_ratio(grid, slice, *gap, env) - log_c).exp();
            GapDomination { gap: *gap, max_ratio, pass: max_ratio <= factor }
        })
        .collect();
    let pass = gaps.iter().all(|g| g.pass);
    Ok(DominationReport { c_tilde: log_c.exp(), fit_gap, factor, gaps, pass })
}

/// Writes tail fits as CSV: `gap, delta_hat, envelope_rate, margin`.
pub fn write_tail_csv<W: std::io::Write>(out: W, rows: &[(f64, TailFit, f64)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["gap", "delta_hat", "envelope_rate", "margin"])?;
    for (gap, fit, rate) in rows {
        wtr.write_record([
            gap.to_string(),
            fit.delta_hat.to_string(),
            rate.to_string(),
            (fit.delta_hat - rate).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
