//! Path simulation for `dX = F dt + σ dB` with `σσᵀ = 2Q` (the generator
//! carries no ½), and Monte Carlo moment curves `ζ(s) = E[W(s, X_t) | X_s = x₀]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::lyapunov::{SpaceTimeWeight, StaticLyapunov, TimeDependentLyapunov};
use crate::operator_model::CoefficientField;

/// Lower-triangular `σ` with `σσᵀ = 2Q`.
pub fn diffusion_factor(q: &Matrix) -> Result<Matrix> {
    let d = q.dim();
    let two_q: Vec<f64> = q.as_slice().iter().map(|v| 2.0 * v).collect();
    let mut l = vec![0.0; d * d];
    linalg::cholesky_into(&two_q, d, &mut l)?;
    Matrix::from_row_major(d, l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    TamedEuler,
    SemiImplicitDrift,
    Euler,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tamed-euler" => Ok(Scheme::TamedEuler),
            "semi-implicit-drift" => Ok(Scheme::SemiImplicitDrift),
            "euler" => Ok(Scheme::Euler),
            other => Err(Error::Input(format!(
                "unknown scheme '{other}' (expected tamed-euler, semi-implicit-drift or euler)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationPlan {
    pub field: CoefficientField,
    pub start: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub paths: usize,
    pub dt: f64,
    pub scheme: Scheme,
    pub seed: u64,
}

impl SimulationPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.start && self.start < self.horizon && self.horizon <= 1.0) {
            return Err(Error::domain(format!("need 0 ≤ s < t ≤ 1, got s = {}, t = {}", self.start, self.horizon)));
        }
        if self.paths == 0 {
            return Err(Error::domain("path count must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::domain(format!("step size must be positive, got {}", self.dt)));
        }
        if self.x0.len() != self.field.dim() {
            return Err(Error::Input(format!(
                "x0 has {} components, field dimension is {}",
                self.x0.len(),
                self.field.dim()
            )));
        }
        Ok(())
    }

    /// Number of steps and the uniform step actually used.
    pub fn steps(&self) -> (usize, f64) {
        let span = self.horizon - self.start;
        let n = ((span / self.dt) - 1e-9).ceil().max(1.0) as usize;
        (n, span / n as f64)
    }
}

/// RNG of path `index`: master seed plus an independent ChaCha stream.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationDiagnostics {
    pub explosions: usize,
    pub max_norm: f64,
    pub steps: usize,
    pub step_size: f64,
    /// Semi-implicit steps that fell back to the tamed update.
    pub implicit_fallbacks: usize,
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub dim: usize,
    pub start: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub seed: u64,
    pub scheme: Scheme,
    /// Row-major `paths × dim`; exploded paths hold NaN.
    pub terminal: Vec<f64>,
    pub diagnostics: SimulationDiagnostics,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.terminal.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.terminal.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.terminal[i * self.dim..(i + 1) * self.dim]
    }

    /// Terminal points of paths that did not explode.
    pub fn valid_points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.terminal.chunks_exact(self.dim).filter(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Path `i` uses stream `i` of the master seed.
    pub fn path_stream(&self, i: usize) -> (u64, u64) {
        (self.seed, i as u64)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string()];
        header.extend((1..=self.dim).map(|k| format!("x{k}")));
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![i.to_string()];
            row.extend(self.point(i).iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

const CHUNK_PATHS: usize = 2048;
const EXPLOSION_NORM: f64 = 1e150;

struct Workspace {
    q: Vec<f64>,
    sigma: Vec<f64>,
    f: Vec<f64>,
    z: Vec<f64>,
    noise: Vec<f64>,
    y: Vec<f64>,
    jac: Vec<f64>,
    f2: Vec<f64>,
    rhs: Vec<f64>,
}

impl Workspace {
    fn new(d: usize) -> Self {
        Self {
            q: vec![0.0; d * d],
            sigma: vec![0.0; d * d],
            f: vec![0.0; d],
            z: vec![0.0; d],
            noise: vec![0.0; d],
            y: vec![0.0; d],
            jac: vec![0.0; d * d],
            f2: vec![0.0; d],
            rhs: vec![0.0; d],
        }
    }
}

/// Solves `y − Δ F(t, y) = b` by Newton with a difference Jacobian.
fn implicit_drift_solve(field: &CoefficientField, t: f64, dt: f64, b: &[f64], ws: &mut Workspace) -> bool {
    let d = b.len();
    for _ in 0..30 {
        field.drift_into(t, &ws.y, &mut ws.f);
        let mut res_norm = 0.0;
        for i in 0..d {
            ws.rhs[i] = -(ws.y[i] - dt * ws.f[i] - b[i]);
            res_norm += ws.rhs[i] * ws.rhs[i];
        }
        let scale = 1.0 + linalg::norm(&ws.y);
        if res_norm.sqrt() <= 1e-12 * scale {
            return true;
        }
        for k in 0..d {
            let h = 1e-7 * (1.0 + ws.y[k].abs());
            let keep = ws.y[k];
            ws.y[k] = keep + h;
            field.drift_into(t, &ws.y, &mut ws.f2);
            ws.y[k] = keep;
            for i in 0..d {
                let dfi = (ws.f2[i] - ws.f[i]) / h;
                ws.jac[i * d + k] = if i == k { 1.0 } else { 0.0 } - dt * dfi;
            }
        }
        if !linalg::solve_in_place(&mut ws.jac, d, &mut ws.rhs) {
            return false;
        }
        for i in 0..d {
            ws.y[i] += ws.rhs[i];
        }
        if !ws.y.iter().all(|v| v.is_finite()) {
            return false;
        }
    }
    false
}

struct PathOutcome {
    exploded: bool,
    max_norm: f64,
    fallbacks: usize,
}

fn run_path(
    plan: &SimulationPlan,
    steps: usize,
    dt: f64,
    index: u64,
    x: &mut [f64],
    ws: &mut Workspace,
) -> Result<PathOutcome> {
    let field = &plan.field;
    let d = x.len();
    let sqrt_dt = dt.sqrt();
    let mut rng = path_rng(plan.seed, index);
    x.copy_from_slice(&plan.x0);
    let mut max_norm = linalg::norm(x);
    let mut fallbacks = 0;

    for k in 0..steps {
        let t = plan.start + k as f64 * dt;
        field.diffusion_into(t, x, &mut ws.q);
        if d == 1 {
            let q = ws.q[0];
            if !(q > 0.0) {
                return Err(Error::Factorization { minor: 1, pivot: 2.0 * q });
            }
            ws.sigma[0] = (2.0 * q).sqrt();
        } else {
            for v in ws.q.iter_mut() {
                *v *= 2.0;
            }
            linalg::cholesky_into(&ws.q, d, &mut ws.sigma)?;
        }
        for zi in ws.z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += ws.sigma[i * d + j] * ws.z[j];
            }
            ws.noise[i] = acc * sqrt_dt;
        }

        field.drift_into(t, x, &mut ws.f);
        match plan.scheme {
            Scheme::Euler => {
                for i in 0..d {
                    x[i] += ws.f[i] * dt + ws.noise[i];
                }
            }
            Scheme::TamedEuler => {
                let tame = 1.0 / (1.0 + dt * linalg::norm(&ws.f));
                for i in 0..d {
                    x[i] += ws.f[i] * dt * tame + ws.noise[i];
                }
            }
            Scheme::SemiImplicitDrift => {
                let tame = 1.0 / (1.0 + dt * linalg::norm(&ws.f));
                let b: Vec<f64> = (0..d).map(|i| x[i] + ws.noise[i]).collect();
                for i in 0..d {
                    ws.y[i] = x[i] + ws.f[i] * dt * tame + ws.noise[i];
                }
                if implicit_drift_solve(field, t + dt, dt, &b, ws) {
                    x.copy_from_slice(&ws.y);
                } else {
                    fallbacks += 1;
                    for i in 0..d {
                        x[i] += ws.f[i] * dt * tame + ws.noise[i];
                    }
                }
            }
        }
        let n = linalg::norm(x);
        if !n.is_finite() || n > EXPLOSION_NORM {
            x.fill(f64::NAN);
            return Ok(PathOutcome { exploded: true, max_norm, fallbacks });
        }
        max_norm = max_norm.max(n);
    }
    Ok(PathOutcome { exploded: false, max_norm, fallbacks })
}

/// Simulates `plan.paths` independent paths from `(s, x₀)` to `t`.
/// Output is a pure function of the plan, independent of the thread count.
pub fn simulate_paths(plan: &SimulationPlan) -> Result<PathEnsemble> {
    plan.validate()?;
    let d = plan.field.dim();
    let (steps, dt) = plan.steps();
    let mut terminal = vec![0.0; plan.paths * d];

    let chunk_stats: Vec<Result<(usize, f64, usize)>> = terminal
        .par_chunks_mut(CHUNK_PATHS * d)
        .enumerate()
        .map(|(c, chunk)| {
            let mut ws = Workspace::new(d);
            let mut stats = (0usize, 0.0_f64, 0usize);
            for (j, x) in chunk.chunks_exact_mut(d).enumerate() {
                let index = (c * CHUNK_PATHS + j) as u64;
                let out = run_path(plan, steps, dt, index, x, &mut ws)?;
                stats.0 += out.exploded as usize;
                stats.1 = stats.1.max(out.max_norm);
                stats.2 += out.fallbacks;
            }
            Ok(stats)
        })
        .collect();

    let mut diagnostics =
        SimulationDiagnostics { explosions: 0, max_norm: 0.0, steps, step_size: dt, implicit_fallbacks: 0 };
    for s in chunk_stats {
        let (e, m, f) = s?;
        diagnostics.explosions += e;
        diagnostics.max_norm = diagnostics.max_norm.max(m);
        diagnostics.implicit_fallbacks += f;
    }
    if diagnostics.explosions == plan.paths {
        return Err(Error::Simulation(format!("all {} paths exploded", plan.paths)));
    }
    Ok(PathEnsemble {
        dim: d,
        start: plan.start,
        horizon: plan.horizon,
        x0: plan.x0.clone(),
        seed: plan.seed,
        scheme: plan.scheme,
        terminal,
        diagnostics,
    })
}

/// Master seed for the `j`-th start time of a moment curve.
pub fn derived_seed(seed: u64, j: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(j + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct MomentRequest {
    pub field: CoefficientField,
    pub starts: Vec<f64>,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub paths: usize,
    pub dt: f64,
    pub scheme: Scheme,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentCurve {
    pub starts: Vec<f64>,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub labels: Vec<String>,
    /// `estimates[i][j]`: weight `i` at start time `starts[j]`.
    pub estimates: Vec<Vec<MomentEstimate>>,
    pub explosions: Vec<usize>,
}

/// One simulation per start time; `ζ̂_i(s_j)` is the sample mean of
/// `W_i(s_j, X_t)` over non-exploded paths.
pub fn moment_curve(req: &MomentRequest, weights: &[(&str, &dyn SpaceTimeWeight)]) -> Result<MomentCurve> {
    let mut estimates = vec![Vec::with_capacity(req.starts.len()); weights.len()];
    let mut explosions = Vec::with_capacity(req.starts.len());
    for (j, &s) in req.starts.iter().enumerate() {
        if s > req.horizon {
            return Err(Error::domain(format!("start time {s} exceeds the horizon {}", req.horizon)));
        }
        if s == req.horizon {
            for (i, (_, w)) in weights.iter().enumerate() {
                estimates[i].push(MomentEstimate { mean: w.value(s, &req.x0), standard_error: 0.0 });
            }
            explosions.push(0);
            continue;
        }
        let plan = SimulationPlan {
            field: req.field.clone(),
            start: s,
            horizon: req.horizon,
            x0: req.x0.clone(),
            paths: req.paths,
            dt: req.dt,
            scheme: req.scheme,
            seed: derived_seed(req.seed, j as u64),
        };
        let ens = simulate_paths(&plan)?;
        for (i, (label, w)) in weights.iter().enumerate() {
            let vals: Vec<f64> = ens.valid_points().map(|p| w.value(s, p)).collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Simulation(format!("weight '{label}' overflows on the terminal sample at s = {s}")));
            }
            let (mean, se) = linalg::mean_and_standard_error(&vals);
            estimates[i].push(MomentEstimate { mean, standard_error: se });
        }
        explosions.push(ens.diagnostics.explosions);
    }
    Ok(MomentCurve {
        starts: req.starts.clone(),
        horizon: req.horizon,
        x0: req.x0.clone(),
        labels: weights.iter().map(|(l, _)| l.to_string()).collect(),
        estimates,
        explosions,
    })
}

impl MomentCurve {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["weight", "s", "zeta_hat", "se"])?;
        for (label, row) in self.labels.iter().zip(&self.estimates) {
            for (s, e) in self.starts.iter().zip(row) {
                wtr.write_record([label.clone(), s.to_string(), e.mean.to_string(), e.standard_error.to_string()])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentEntry {
    pub s: f64,
    pub estimate: f64,
    pub standard_error: f64,
    pub bound: f64,
    /// `bound · (1 + σ·SE/estimate)`.
    pub slack_bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub sigma: f64,
    pub w_entries: Vec<MomentEntry>,
    pub v_entries: Vec<MomentEntry>,
    pub pass: bool,
}

fn moment_entry(s: f64, e: MomentEstimate, bound: f64, sigma: f64) -> MomentEntry {
    let rel = if e.mean > 0.0 { e.standard_error / e.mean } else { 0.0 };
    let slack_bound = bound * (1.0 + sigma * rel);
    MomentEntry {
        s,
        estimate: e.mean,
        standard_error: e.standard_error,
        bound,
        slack_bound,
        pass: e.mean <= slack_bound,
    }
}

/// Checks `ζ̂(s) ≤ e^{∫_s^t h} W(t,x₀)` for weight `w_index`, and when `v` is
/// given, `E V(X_t) ≤ V(x₀) + M(t−s)` for weight `v.0`, both at `sigma`
/// standard errors of slack.
pub fn verify_moment_bound(
    curve: &MomentCurve,
    w_index: usize,
    w: &TimeDependentLyapunov,
    v: Option<(usize, &StaticLyapunov)>,
    sigma: f64,
) -> Result<MomentReport> {
    if w_index >= curve.estimates.len() {
        return Err(Error::Input(format!("moment curve has no weight {w_index}")));
    }
    let t = curve.horizon;
    let w_t = w.value(t, &curve.x0);
    let mut w_entries = Vec::new();
    for (j, &s) in curve.starts.iter().enumerate() {
        let integral = w.h_integral(s, t);
        if !integral.is_finite() {
            return Err(Error::domain(format!("∫h over ({s}, {t}) is not finite")));
        }
        w_entries.push(moment_entry(s, curve.estimates[w_index][j], integral.exp() * w_t, sigma));
    }
    let mut v_entries = Vec::new();
    if let Some((vi, vl)) = v {
        if vi >= curve.estimates.len() {
            return Err(Error::Input(format!("moment curve has no weight {vi}")));
        }
        let v0 = vl.value(&curve.x0);
        for (j, &s) in curve.starts.iter().enumerate() {
            v_entries.push(moment_entry(s, curve.estimates[vi][j], v0 + vl.m_bound * (t - s), sigma));
        }
    }
    let pass = w_entries.iter().chain(&v_entries).all(|e| e.pass);
    Ok(MomentReport { sigma, w_entries, v_entries, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::UnitWeight;
    use crate::operator_model::{brownian, ornstein_uhlenbeck};

    #[test]
    fn factor_examples() {
        let s = diffusion_factor(&Matrix::identity(2)).unwrap();
        let r2 = 2f64.sqrt();
        assert!((s.get(0, 0) - r2).abs() < 1e-15 && s.get(1, 0) == 0.0 && (s.get(1, 1) - r2).abs() < 1e-15);
        let s = diffusion_factor(&Matrix::diagonal(&[2.0, 0.5])).unwrap();
        assert_eq!(s, Matrix::diagonal(&[2.0, 1.0]));
        let bad = Matrix::from_row_major(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        match diffusion_factor(&bad) {
            Err(Error::Factorization { minor, .. }) => assert_eq!(minor, 2),
            other => panic!("{other:?}"),
        }
    }

    fn plan(field: CoefficientField, x0: Vec<f64>, paths: usize, span: f64, seed: u64) -> SimulationPlan {
        SimulationPlan { field, start: 0.0, horizon: span, x0, paths, dt: 1e-2, scheme: Scheme::TamedEuler, seed }
    }

    #[test]
    fn brownian_moments() {
        let p = plan(brownian(2, 0.5), vec![0.0, 0.0], 20_000, 1.0, 7);
        let ens = simulate_paths(&p).unwrap();
        for k in 0..2 {
            let xs: Vec<f64> = ens.valid_points().map(|x| x[k]).collect();
            let (mean, se) = linalg::mean_and_standard_error(&xs);
            assert!(mean.abs() < 4.0 * se, "mean {mean} se {se}");
            let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
            let (var, se2) = linalg::mean_and_standard_error(&sq);
            assert!((var - 1.0).abs() < 4.0 * se2, "var {var}");
        }
    }

    #[test]
    fn reproducible_and_thread_independent() {
        let p = plan(ornstein_uhlenbeck(1, 1.0, 1.0), vec![0.3], 5000, 0.5, 11);
        let a = simulate_paths(&p).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| simulate_paths(&p).unwrap());
        assert_eq!(a.terminal, b.terminal);
        let mut q = p.clone();
        q.seed = 12;
        assert_ne!(simulate_paths(&q).unwrap().terminal, a.terminal);
    }

    #[test]
    fn schemes_agree_on_ou() {
        for scheme in [Scheme::Euler, Scheme::SemiImplicitDrift] {
            let mut p = plan(ornstein_uhlenbeck(1, 1.0, 1.0), vec![0.0], 20_000, std::f64::consts::LN_2, 3);
            p.scheme = scheme;
            p.dt = 1e-3;
            let ens = simulate_paths(&p).unwrap();
            let sq: Vec<f64> = ens.valid_points().map(|x| x[0] * x[0]).collect();
            let (var, se) = linalg::mean_and_standard_error(&sq);
            assert!((var - 0.75).abs() < 4.0 * se, "{scheme:?}: {var}");
            assert_eq!(ens.diagnostics.implicit_fallbacks, 0);
        }
    }

    #[test]
    fn invalid_plans() {
        let mut p = plan(brownian(1, 1.0), vec![0.0], 10, 1.0, 0);
        p.paths = 0;
        assert!(simulate_paths(&p).is_err());
        let mut p = plan(brownian(1, 1.0), vec![0.0], 10, 1.0, 0);
        p.start = 1.0;
        assert!(simulate_paths(&p).is_err());
        assert!(simulate_paths(&plan(brownian(1, 1.0), vec![0.0, 1.0], 10, 1.0, 0)).is_err());
    }

    #[test]
    fn explosive_euler_is_recorded() {
        let field = CoefficientField::new(
            1,
            1.0,
            |_, _, q: &mut [f64]| q[0] = 1.0,
            |_, x: &[f64], f: &mut [f64]| f[0] = -x[0].powi(5),
        );
        let mut p = plan(field, vec![5.0], 50, 0.5, 1);
        p.scheme = Scheme::Euler;
        p.dt = 0.1;
        match simulate_paths(&p) {
            Err(Error::Simulation(msg)) => assert!(msg.contains("exploded")),
            other => panic!("{:?}", other.map(|e| e.diagnostics)),
        }
        p.scheme = Scheme::TamedEuler;
        assert_eq!(simulate_paths(&p).unwrap().diagnostics.explosions, 0);
    }

    #[test]
    fn unit_weight_curve() {
        let req = MomentRequest {
            field: brownian(1, 1.0),
            starts: vec![0.0, 0.5, 1.0],
            horizon: 1.0,
            x0: vec![0.0],
            paths: 100,
            dt: 0.05,
            scheme: Scheme::TamedEuler,
            seed: 5,
        };
        let curve = moment_curve(&req, &[("one", &UnitWeight)]).unwrap();
        for e in &curve.estimates[0] {
            assert_eq!(e.mean, 1.0);
            assert_eq!(e.standard_error, 0.0);
        }
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("weight,s,zeta_hat,se"));
    }
}
