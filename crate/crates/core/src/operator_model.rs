//! Coefficient fields of `A(t) = Σ q_ij(t,x) D_ij + Σ F_j(t,x) D_j`, the
//! polynomial-growth family `(1+|x|^m) Tr(Q⁰ D²) − b|x|^{p−1} x·∇`, and grid
//! checks of the structural hypotheses (ellipticity, diffusion growth, drift
//! growth and coercivity).

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ShellGrid};
use crate::linalg::{self, Matrix};

/// `(t, x, out)` writes a row-major `d×d` matrix into `out`.
pub type MatrixFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
/// `(t, x, out)` writes a vector of length `d` into `out`.
pub type VectorFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
/// `(t, x, i, j, k)` returns `∂q_ij/∂x_k`.
pub type MatrixGradFn = dyn Fn(f64, &[f64], usize, usize, usize) -> f64 + Send + Sync;
/// `(t, x)` returns a scalar.
pub type ScalarFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// Finite-difference step for the `∂q_ij/∂x_k` fallback.
pub fn fd_step(x: &[f64]) -> f64 {
    (1e-5 * linalg::norm(x)).max(1e-5)
}

/// Diffusion matrix `Q(t,x)` and drift `F(t,x)` on `[0,1] × ℝ^d`, with a
/// declared ellipticity constant `η`. Immutable and cheap to clone.
#[derive(Clone)]
pub struct CoefficientField {
    dim: usize,
    eta: f64,
    diffusion: Arc<MatrixFn>,
    drift: Arc<VectorFn>,
    diffusion_grad: Option<Arc<MatrixGradFn>>,
    autonomous: bool,
    label: String,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("eta", &self.eta)
            .field("analytic_dq", &self.diffusion_grad.is_some())
            .field("autonomous", &self.autonomous)
            .finish()
    }
}

impl CoefficientField {
    pub fn new<Q, F>(dim: usize, eta: f64, diffusion: Q, drift: F) -> Self
    where
        Q: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            dim,
            eta,
            diffusion: Arc::new(diffusion),
            drift: Arc::new(drift),
            diffusion_grad: None,
            autonomous: false,
            label: "custom".into(),
        }
    }

    pub fn with_diffusion_grad<G>(mut self, grad: G) -> Self
    where
        G: Fn(f64, &[f64], usize, usize, usize) -> f64 + Send + Sync + 'static,
    {
        self.diffusion_grad = Some(Arc::new(grad));
        self
    }

    pub(crate) fn with_diffusion_grad_arc(mut self, grad: Option<Arc<MatrixGradFn>>) -> Self {
        self.diffusion_grad = grad;
        self
    }

    /// Marks the coefficients as time independent, which lets the
    /// finite-difference solver reuse its face coefficients.
    pub fn time_independent(mut self) -> Self {
        self.autonomous = true;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn is_autonomous(&self) -> bool {
        self.autonomous
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn has_analytic_grad(&self) -> bool {
        self.diffusion_grad.is_some()
    }

    /// Unchecked evaluation of `Q(t,x)` into a `d*d` buffer.
    #[inline]
    pub fn diffusion_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    /// Unchecked evaluation of `F(t,x)` into a `d` buffer.
    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    pub fn diffusion(&self, t: f64, x: &[f64]) -> Result<Matrix> {
        let mut q = Matrix::zeros(self.dim);
        self.diffusion_into(t, x, q.as_mut_slice());
        if q.as_slice().iter().all(|v| v.is_finite()) {
            Ok(q)
        } else {
            Err(Error::CoefficientEvaluation { t, x: x.to_vec() })
        }
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut f = vec![0.0; self.dim];
        self.drift_into(t, x, &mut f);
        if f.iter().all(|v| v.is_finite()) {
            Ok(f)
        } else {
            Err(Error::CoefficientEvaluation { t, x: x.to_vec() })
        }
    }

    /// `(Q(t,x), F(t,x))`, failing on non-finite output.
    pub fn eval_coefficients(&self, t: f64, x: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        Ok((self.diffusion(t, x)?, self.drift(t, x)?))
    }

    /// `∂q_ij/∂x_k`: analytic when available, otherwise central differences
    /// with step [`fd_step`].
    pub fn diffusion_derivative(&self, t: f64, x: &[f64], i: usize, j: usize, k: usize) -> f64 {
        if let Some(g) = &self.diffusion_grad {
            return g(t, x, i, j, k);
        }
        self.diffusion_derivative_fd(t, x, i, j, k)
    }

    pub fn diffusion_derivative_fd(&self, t: f64, x: &[f64], i: usize, j: usize, k: usize) -> f64 {
        let d = self.dim;
        let h = fd_step(x);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let mut qp = vec![0.0; d * d];
        let mut qm = vec![0.0; d * d];
        self.diffusion_into(t, &xp, &mut qp);
        self.diffusion_into(t, &xm, &mut qm);
        (qp[i * d + j] - qm[i * d + j]) / (2.0 * h)
    }

    /// `Σ_i ∂q_ij/∂x_i` (`j` is 0-based).
    pub fn spatial_divergence(&self, t: f64, x: &[f64], j: usize) -> Result<f64> {
        let v: f64 = (0..self.dim).map(|i| self.diffusion_derivative(t, x, i, j, i)).sum();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::CoefficientEvaluation { t, x: x.to_vec() })
        }
    }
}

/// Nonnegative coercivity rate `b(t,x)` of the drift.
#[derive(Clone)]
pub struct CoercivityRate {
    f: Arc<ScalarFn>,
    constant: Option<f64>,
}

impl fmt::Debug for CoercivityRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.constant {
            Some(c) => write!(f, "CoercivityRate::Constant({c})"),
            None => write!(f, "CoercivityRate::Function"),
        }
    }
}

impl CoercivityRate {
    pub fn constant(c: f64) -> Self {
        Self { f: Arc::new(move |_, _| c), constant: Some(c) }
    }

    pub fn function<B>(f: B) -> Self
    where
        B: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        Self { f: Arc::new(f), constant: None }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        (self.f)(t, x)
    }

    pub fn as_constant(&self) -> Option<f64> {
        self.constant
    }
}

/// Growth constants `(m, p, Λ, κ, K)` and the rate `b`.
#[derive(Debug, Clone)]
pub struct GrowthParams {
    pub m: f64,
    pub p: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub coercivity_radius: f64,
    pub b: CoercivityRate,
}

impl GrowthParams {
    pub fn new(m: f64, p: f64, lambda: f64, kappa: f64, coercivity_radius: f64, b: CoercivityRate) -> Result<Self> {
        let gp = Self { m, p, lambda, kappa, coercivity_radius, b };
        gp.validate()?;
        Ok(gp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m >= 0.0) {
            return Err(Error::domain(format!("diffusion growth power m = {} must be ≥ 0", self.m)));
        }
        let floor = (self.m - 1.0).max(1.0);
        if !(self.p > floor) {
            return Err(Error::domain(format!("drift power p = {} must exceed max(m-1, 1) = {floor}", self.p)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::domain(format!("growth constant Λ = {} must be positive", self.lambda)));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::domain(format!("coercivity constant κ = {} must be positive", self.kappa)));
        }
        if !(self.coercivity_radius >= 1.0) {
            return Err(Error::domain(format!("coercivity radius K = {} must be ≥ 1", self.coercivity_radius)));
        }
        Ok(())
    }

    /// `β = p + 1 − m`.
    pub fn beta(&self) -> f64 {
        self.p + 1.0 - self.m
    }

    /// `(p+1−m)/(p−1)`: the exponent `α` must exceed this.
    pub fn alpha_threshold(&self) -> f64 {
        self.beta() / (self.p - 1.0)
    }

    /// `Λ(1 + |x|^m)`.
    pub fn diffusion_bound(&self, r: f64) -> f64 {
        self.lambda * (1.0 + r.powf(self.m))
    }
}

/// The bounded, uniformly elliptic base matrix `Q⁰` of the polynomial family.
#[derive(Clone)]
pub struct BaseDiffusion {
    dim: usize,
    eta: f64,
    matrix: Arc<MatrixFn>,
    grad: Option<Arc<MatrixGradFn>>,
    constant: bool,
}

impl fmt::Debug for BaseDiffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BaseDiffusion").field("dim", &self.dim).field("eta", &self.eta).finish()
    }
}

impl BaseDiffusion {
    /// `Q⁰ = c·I`, ellipticity `c`, zero derivatives.
    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        Self::constant(Matrix::scaled_identity(dim, c), c)
    }

    /// Constant symmetric matrix with declared ellipticity `eta`.
    pub fn constant(m: Matrix, eta: f64) -> Self {
        let dim = m.dim();
        let data = m.as_slice().to_vec();
        Self {
            dim,
            eta,
            matrix: Arc::new(move |_, _, out: &mut [f64]| out.copy_from_slice(&data)),
            grad: Some(Arc::new(|_, _, _, _, _| 0.0)),
            constant: true,
        }
    }

    pub fn function<Q>(dim: usize, eta: f64, q: Q) -> Self
    where
        Q: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self { dim, eta, matrix: Arc::new(q), grad: None, constant: false }
    }

    pub fn with_grad<G>(mut self, g: G) -> Self
    where
        G: Fn(f64, &[f64], usize, usize, usize) -> f64 + Send + Sync + 'static,
    {
        self.grad = Some(Arc::new(g));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

/// Radial weight `1 + |x|^m` of the polynomial family; `m = 0` is read as
/// the unweighted operator `Tr(Q⁰D²)`.
fn growth_weight(m: f64, r: f64) -> f64 {
    if m == 0.0 {
        1.0
    } else {
        1.0 + r.powf(m)
    }
}

/// `∂_k (1+|x|^m)` for `m > 0`; zero at the origin.
fn growth_weight_grad(m: f64, x: &[f64], r: f64, k: usize) -> f64 {
    if m == 0.0 || r == 0.0 {
        0.0
    } else {
        m * r.powf(m - 2.0) * x[k]
    }
}

/// The operator family `(1+|x|^m) Tr(Q⁰(t,x) D²φ) − b(t,x)|x|^{p−1}⟨x,∇φ⟩`:
/// `Q = (1+|x|^m) Q⁰`, `F = −b|x|^{p−1}x`, `η = η(Q⁰)`.
pub fn make_polynomial(d: usize, params: &GrowthParams, q0: BaseDiffusion) -> Result<CoefficientField> {
    params.validate()?;
    if q0.dim != d {
        return Err(Error::Input(format!("Q⁰ has dimension {}, expected {d}", q0.dim)));
    }
    if !(q0.eta > 0.0) {
        return Err(Error::domain(format!("ellipticity of Q⁰ must be positive, got {}", q0.eta)));
    }
    let m = params.m;
    let p = params.p;
    let eta = q0.eta;

    let base = q0.matrix.clone();
    let diffusion = move |t: f64, x: &[f64], out: &mut [f64]| {
        base(t, x, out);
        let w = growth_weight(m, linalg::norm(x));
        for v in out.iter_mut() {
            *v *= w;
        }
    };

    let b = params.b.clone();
    let drift = move |t: f64, x: &[f64], out: &mut [f64]| {
        let r = linalg::norm(x);
        let scale = if r == 0.0 { 0.0 } else { -b.eval(t, x) * r.powf(p - 1.0) };
        for (o, xi) in out.iter_mut().zip(x) {
            *o = scale * xi;
        }
    };

    let grad = q0.grad.clone().map(|g0| {
        let base = q0.matrix.clone();
        let dim = d;
        Arc::new(move |t: f64, x: &[f64], i: usize, j: usize, k: usize| {
            let r = linalg::norm(x);
            let mut q = vec![0.0; dim * dim];
            base(t, x, &mut q);
            growth_weight_grad(m, x, r, k) * q[i * dim + j] + growth_weight(m, r) * g0(t, x, i, j, k)
        }) as Arc<MatrixGradFn>
    });

    let mut field = CoefficientField::new(d, eta, diffusion, drift)
        .with_diffusion_grad_arc(grad)
        .with_label(format!("polynomial(d={d},m={m},p={p})"));
    // Constant Q⁰ and constant b give a time-independent operator.
    if params.b.as_constant().is_some() && q0.constant {
        field = field.time_independent();
    }
    Ok(field)
}

/// `Q = q·I`, `F = 0`.
pub fn brownian(d: usize, q: f64) -> CoefficientField {
    CoefficientField::new(
        d,
        q,
        move |_, _, out: &mut [f64]| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = q;
            }
        },
        |_, _, out: &mut [f64]| out.fill(0.0),
    )
    .with_diffusion_grad(|_, _, _, _, _| 0.0)
    .time_independent()
    .with_label(format!("brownian(q={q})"))
}

/// `Q = q·I`, `F = −θx`.
pub fn ornstein_uhlenbeck(d: usize, theta: f64, q: f64) -> CoefficientField {
    CoefficientField::new(
        d,
        q,
        move |_, _, out: &mut [f64]| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = q;
            }
        },
        move |_, x: &[f64], out: &mut [f64]| {
            for (o, xi) in out.iter_mut().zip(x) {
                *o = -theta * xi;
            }
        },
    )
    .with_diffusion_grad(|_, _, _, _, _| 0.0)
    .time_independent()
    .with_label(format!("ornstein_uhlenbeck(theta={theta},q={q})"))
}

/// Condition identifiers, in report order.
pub const CONDITION_IDS: [&str; 6] =
    ["ellipticity", "q_radial_growth", "q_quadratic_growth", "dq_growth", "drift_growth_B1", "drift_coercive_B2B3"];

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GridPoint {
    pub t: f64,
    pub x: Vec<f64>,
}

/// One checked inequality `lhs ≤ rhs`. `worst_excess` is the largest
/// `lhs − rhs` seen on the grid (positive values are violations).
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ConditionResult {
    pub id: String,
    pub pass: bool,
    pub worst_excess: f64,
    pub worst_point: Option<GridPoint>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct HypothesisReport {
    pub conditions: Vec<ConditionResult>,
    pub grid: GridSpec,
    pub max_asymmetry: f64,
    pub pass: bool,
}

impl HypothesisReport {
    pub fn condition(&self, id: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Relative slack under which an equality case still counts as satisfied.
const HYPOTHESIS_REL_TOL: f64 = 1e-10;

struct Tracker {
    worst: f64,
    worst_scaled: f64,
    at: Option<GridPoint>,
    pass: bool,
}

impl Tracker {
    fn new() -> Self {
        Self { worst: f64::NEG_INFINITY, worst_scaled: f64::NEG_INFINITY, at: None, pass: true }
    }

    fn record(&mut self, lhs: f64, rhs: f64, t: f64, x: &[f64]) {
        let excess = lhs - rhs;
        let scale = 1.0_f64.max(lhs.abs()).max(rhs.abs());
        let bad = !excess.is_finite() || excess > HYPOTHESIS_REL_TOL * scale;
        if bad {
            self.pass = false;
        }
        let scaled = if excess.is_finite() { excess / scale } else { f64::INFINITY };
        if scaled > self.worst_scaled || self.at.is_none() {
            self.worst_scaled = scaled;
            self.worst = excess;
            self.at = Some(GridPoint { t, x: x.to_vec() });
        }
    }

    fn finish(self, id: &str) -> ConditionResult {
        ConditionResult {
            id: id.to_string(),
            pass: self.pass,
            worst_excess: if self.at.is_some() { self.worst } else { 0.0 },
            worst_point: self.at,
        }
    }
}

/// Grid certification of the structural hypotheses. Advisory: violations
/// become report entries, never errors.
pub fn check_hypotheses(
    field: &CoefficientField,
    params: &GrowthParams,
    grid: &ShellGrid,
    probes: &[Vec<f64>],
) -> HypothesisReport {
    let d = field.dim();
    let mut trackers: Vec<Tracker> = (0..CONDITION_IDS.len()).map(|_| Tracker::new()).collect();
    let mut q = vec![0.0; d * d];
    let mut f = vec![0.0; d];
    let mut qx = vec![0.0; d];
    let mut asym = 0.0_f64;
    let points = grid.points();

    let unit_probes: Vec<Vec<f64>> = probes
        .iter()
        .filter_map(|p| {
            let n = linalg::norm(p);
            (n > 0.0).then(|| p.iter().map(|c| c / n).collect())
        })
        .collect();

    for &t in grid.times() {
        for x in &points {
            field.diffusion_into(t, x, &mut q);
            field.drift_into(t, x, &mut f);
            let r = linalg::norm(x);
            let bound = params.diffusion_bound(r);

            for i in 0..d {
                for j in (i + 1)..d {
                    asym = asym.max((q[i * d + j] - q[j * d + i]).abs());
                }
            }

            for xi in &unit_probes {
                let form = linalg::quad_form(&q, d, xi);
                trackers[0].record(field.eta(), form, t, x);
                trackers[2].record(form, bound, t, x);
            }

            linalg::mat_vec(&q, d, x, &mut qx);
            trackers[1].record(linalg::norm(&qx), bound * r, t, x);

            for i in 0..d {
                for j in 0..d {
                    let dq = field.diffusion_derivative(t, x, i, j, i);
                    trackers[3].record(dq.abs(), bound, t, x);
                }
            }

            trackers[4].record(linalg::norm(&f), params.lambda * r.powf(params.p), t, x);

            let b = params.b.eval(t, x);
            let fx = linalg::dot(&f, x);
            trackers[5].record(fx + b * r.powf(params.p + 1.0), 0.0, t, x);
            trackers[5].record(-b, 0.0, t, x);
            if r >= params.coercivity_radius {
                trackers[5].record(params.kappa, b, t, x);
            }
        }
    }

    let conditions: Vec<ConditionResult> =
        trackers.into_iter().zip(CONDITION_IDS).map(|(tr, id)| tr.finish(id)).collect();
    let pass = conditions.iter().all(|c| c.pass);
    HypothesisReport { conditions, grid: grid.spec(), max_asymmetry: asym, pass }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(d: usize, m: f64, p: f64) -> CoefficientField {
        let gp = GrowthParams::new(m, p, 1.0, 1.0, 1.0, CoercivityRate::constant(1.0)).unwrap();
        make_polynomial(d, &gp, BaseDiffusion::scaled_identity(d, 1.0)).unwrap()
    }

    #[test]
    fn polynomial_substitution() {
        let f = example(1, 0.0, 3.0);
        let (q, drift) = f.eval_coefficients(0.3, &[2.0]).unwrap();
        assert_eq!(drift, vec![-8.0]);
        assert_eq!(q.get(0, 0), 1.0);
        assert_eq!(f.drift(0.0, &[0.0]).unwrap(), vec![0.0]);
        let f2 = example(2, 2.0, 3.0);
        let q2 = f2.diffusion(0.0, &[1.0, 0.0]).unwrap();
        assert_eq!(q2, Matrix::scaled_identity(2, 2.0));
    }

    #[test]
    fn eval_coefficients_odd_drift() {
        let f = example(1, 0.0, 3.0);
        assert_eq!(f.eval_coefficients(0.0, &[1.0]).unwrap().1, vec![-1.0]);
        assert_eq!(f.eval_coefficients(0.0, &[-1.0]).unwrap().1, vec![1.0]);
        assert_eq!(f.eval_coefficients(0.0, &[0.5]).unwrap().1, vec![-0.125]);
    }

    #[test]
    fn non_finite_coefficient_is_an_error() {
        let f = CoefficientField::new(
            1,
            1.0,
            |_, x: &[f64], o: &mut [f64]| o[0] = 1.0 / x[0],
            |_, _, o: &mut [f64]| o[0] = 0.0,
        );
        assert!(matches!(f.eval_coefficients(0.0, &[0.0]), Err(Error::CoefficientEvaluation { .. })));
    }

    #[test]
    fn invalid_growth_params_rejected() {
        let err = GrowthParams::new(0.0, 1.0, 1.0, 1.0, 1.0, CoercivityRate::constant(1.0)).unwrap_err();
        assert!(matches!(err, Error::ParameterDomain(_)));
        assert!(GrowthParams::new(3.0, 1.5, 1.0, 1.0, 1.0, CoercivityRate::constant(1.0)).is_err());
        assert!(GrowthParams::new(0.0, 3.0, 1.0, 1.0, 0.5, CoercivityRate::constant(1.0)).is_err());
    }

    #[test]
    fn divergence_examples() {
        let f = brownian(2, 1.0);
        assert_eq!(f.spatial_divergence(0.0, &[1.0, 2.0], 0).unwrap(), 0.0);

        let g = CoefficientField::new(
            1,
            1.0,
            |_, x: &[f64], o: &mut [f64]| o[0] = 1.0 + x[0] * x[0],
            |_, _, o: &mut [f64]| o[0] = 0.0,
        );
        assert!((g.spatial_divergence(0.0, &[3.0], 0).unwrap() - 6.0).abs() < 1e-8);

        let f2 = example(2, 2.0, 3.0);
        assert!((f2.spatial_divergence(0.0, &[1.0, 1.0], 0).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn analytic_and_fd_divergence_agree() {
        let f = example(2, 2.0, 3.0);
        for x in [[0.3, -0.7], [2.0, 1.5], [-4.0, 0.1]] {
            for j in 0..2 {
                for i in 0..2 {
                    let a = f.diffusion_derivative(0.0, &x, i, j, i);
                    let n = f.diffusion_derivative_fd(0.0, &x, i, j, i);
                    let h = fd_step(&x);
                    // third derivatives of (1+|x|^2) vanish: only rounding remains
                    assert!((a - n).abs() <= 10.0 * h * h + 1e-9 * (1.0 + a.abs()), "{a} vs {n}");
                }
            }
        }
    }

    #[test]
    fn example_family_passes() {
        let gp = GrowthParams::new(0.0, 3.0, 1.0, 1.0, 1.0, CoercivityRate::constant(1.0)).unwrap();
        let f = make_polynomial(1, &gp, BaseDiffusion::scaled_identity(1, 1.0)).unwrap();
        let grid = ShellGrid::uniform(1, 0.0, 1.0, 0.25, 10.0, 0.1).unwrap();
        let rep = check_hypotheses(&f, &gp, &grid, &[vec![1.0]]);
        assert!(rep.pass, "{rep:#?}");
        assert_eq!(rep.conditions.len(), 6);
    }

    #[test]
    fn declared_ellipticity_too_large() {
        let gp = GrowthParams::new(0.0, 3.0, 1.0, 1.0, 1.0, CoercivityRate::constant(1.0)).unwrap();
        let base = BaseDiffusion::constant(Matrix::scaled_identity(1, 0.5), 1.0);
        let f = make_polynomial(1, &gp, base).unwrap();
        let grid = ShellGrid::uniform(1, 0.0, 1.0, 0.5, 3.0, 1.0).unwrap();
        let rep = check_hypotheses(&f, &gp, &grid, &[vec![1.0]]);
        let c = rep.condition("ellipticity").unwrap();
        assert!(!c.pass);
        assert!((c.worst_excess - 0.5).abs() < 1e-15);
        assert!(!rep.pass);
    }

    #[test]
    fn repulsive_drift_fails_coercivity() {
        let gp = GrowthParams::new(0.0, 3.0, 1.0, 1.0, 1.0, CoercivityRate::constant(1.0)).unwrap();
        let f = CoefficientField::new(
            1,
            1.0,
            |_, _, o: &mut [f64]| o[0] = 1.0,
            |_, x: &[f64], o: &mut [f64]| o[0] = x[0].abs().powi(2) * x[0],
        );
        let grid = ShellGrid::new(1, vec![0.0], vec![1.0]).unwrap();
        let rep = check_hypotheses(&f, &gp, &grid, &[vec![1.0]]);
        let c = rep.condition("drift_coercive_B2B3").unwrap();
        assert!(!c.pass);
        assert!((c.worst_excess - 2.0).abs() < 1e-15);
    }

    #[test]
    fn report_serializes_all_ids() {
        let gp = GrowthParams::new(0.0, 3.0, 1.0, 1.0, 1.0, CoercivityRate::constant(1.0)).unwrap();
        let f = example(1, 0.0, 3.0);
        let grid = ShellGrid::uniform(1, 0.0, 1.0, 0.5, 2.0, 0.5).unwrap();
        let json = check_hypotheses(&f, &gp, &grid, &[vec![1.0]]).to_json().unwrap();
        for id in CONDITION_IDS {
            assert!(json.contains(id));
        }
    }
}
