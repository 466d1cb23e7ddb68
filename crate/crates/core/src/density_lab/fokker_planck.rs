//! Explicit conservative finite-volume solver of the forward equation
//! `∂_τρ = Σ D_ij(q_ij ρ) − div(Fρ)` on a box, `d ∈ {1, 2}`.
//!
//! Along each axis the flux `F_kρ − D_k(q_kk ρ)` uses the exponentially
//! fitted (Scharfetter–Gummel) two-point form on `u = q_kk ρ`; off-diagonal
//! terms `−D_l(q_kl ρ)` use central differences. For diagonal `Q` and `dt`
//! below [`cfl_step`] the update matrix is nonnegative.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DensityField, Provenance, SpaceGrid};
use crate::error::{Error, Result};
use crate::operator_model::CoefficientField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Zero density outside the box; outflow is recorded as leakage.
    #[default]
    Absorbing,
    /// Zero flux through the box faces.
    Reflecting,
}

#[derive(Debug, Clone)]
pub struct FdConfig {
    pub grid: SpaceGrid,
    /// Time step; `None` picks 90% of the admissible explicit step.
    pub dt: Option<f64>,
    pub boundary: Boundary,
}

/// Smallest box radius `R` with `δ₀ gap^α R^β ≥ target`.
pub fn lyapunov_box_radius(delta0: f64, alpha: f64, beta: f64, gap: f64, target: f64) -> f64 {
    (target / (delta0 * gap.powf(alpha))).powf(1.0 / beta)
}

/// `z / (e^z − 1)`.
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        1.0 - 0.5 * z + z * z / 12.0
    } else {
        z / z.exp_m1()
    }
}

const FLUSH: f64 = 1e-300;

/// Nodal and face coefficients at one time.
struct Operator {
    dim: usize,
    n: Vec<usize>,
    stride: Vec<usize>,
    dx: Vec<f64>,
    /// `q_kk` at nodes, per axis.
    qdiag: Vec<Vec<f64>>,
    /// `q_12` at nodes (2D only).
    qoff: Vec<f64>,
    /// `B(−a)` and `B(a)` at the face right of each node, per axis.
    right_m: Vec<Vec<f64>>,
    right_p: Vec<Vec<f64>>,
    /// Same for the left boundary face of nodes with `i_k = 0`.
    left_m: Vec<Vec<f64>>,
    left_p: Vec<Vec<f64>>,
}

impl Operator {
    fn build(field: &CoefficientField, grid: &SpaceGrid, tau: f64) -> Result<Self> {
        let d = grid.dim();
        let len = grid.len();
        let mut stride = vec![1; d];
        for k in (0..d.saturating_sub(1)).rev() {
            stride[k] = stride[k + 1] * grid.n[k + 1];
        }
        let dx: Vec<f64> = (0..d).map(|k| grid.spacing(k)).collect();
        let mut op = Operator {
            dim: d,
            n: grid.n.clone(),
            stride,
            dx: dx.clone(),
            qdiag: vec![vec![0.0; len]; d],
            qoff: vec![0.0; if d == 2 { len } else { 0 }],
            right_m: vec![vec![0.0; len]; d],
            right_p: vec![vec![0.0; len]; d],
            left_m: vec![vec![0.0; len]; d],
            left_p: vec![vec![0.0; len]; d],
        };
        let mut q = vec![0.0; d * d];
        let mut f = vec![0.0; d];
        let face = |y: &[f64], k: usize, q: &mut [f64], f: &mut [f64]| -> Result<(f64, f64)> {
            field.diffusion_into(tau, y, q);
            field.drift_into(tau, y, f);
            let qkk = q[k * d + k];
            if !(qkk > 0.0) || !f[k].is_finite() {
                return Err(Error::CoefficientEvaluation { t: tau, x: y.to_vec() });
            }
            let a = f[k] * dx[k] / qkk;
            Ok((bernoulli(-a), bernoulli(a)))
        };
        for idx in 0..len {
            let y = grid.point(idx);
            field.diffusion_into(tau, &y, &mut q);
            if !q.iter().all(|v| v.is_finite()) {
                return Err(Error::CoefficientEvaluation { t: tau, x: y });
            }
            for k in 0..d {
                op.qdiag[k][idx] = q[k * d + k];
            }
            if d == 2 {
                op.qoff[idx] = 0.5 * (q[1] + q[2]);
            }
            let mi = grid.multi_index(idx);
            for k in 0..d {
                let mut yf = y.clone();
                yf[k] += 0.5 * dx[k];
                let (bm, bp) = face(&yf, k, &mut q, &mut f)?;
                op.right_m[k][idx] = bm;
                op.right_p[k][idx] = bp;
                if mi[k] == 0 {
                    yf[k] = y[k] - 0.5 * dx[k];
                    let (bm, bp) = face(&yf, k, &mut q, &mut f)?;
                    op.left_m[k][idx] = bm;
                    op.left_p[k][idx] = bp;
                }
            }
        }
        Ok(op)
    }

    fn axis_index(&self, idx: usize, k: usize) -> usize {
        (idx / self.stride[k]) % self.n[k]
    }

    /// Largest step keeping the diagonal update coefficient nonnegative.
    fn cfl(&self) -> f64 {
        let len = self.qdiag[0].len();
        let mut worst: f64 = 0.0;
        for idx in 0..len {
            let mut rate = 0.0;
            for k in 0..self.dim {
                let i = self.axis_index(idx, k);
                let bl = if i == 0 { self.left_p[k][idx] } else { self.right_p[k][idx - self.stride[k]] };
                rate += self.qdiag[k][idx] * (self.right_m[k][idx] + bl) / (self.dx[k] * self.dx[k]);
            }
            worst = worst.max(rate);
        }
        if worst > 0.0 {
            1.0 / worst
        } else {
            f64::INFINITY
        }
    }

    /// `w = q_12 ρ` at the node offset by `dl` along axis `l`, zero outside.
    fn cross_value(&self, w: &[f64], idx: usize, l: usize, dl: isize) -> f64 {
        let i = self.axis_index(idx, l) as isize + dl;
        if i < 0 || i >= self.n[l] as isize {
            0.0
        } else {
            w[(idx as isize + dl * self.stride[l] as isize) as usize]
        }
    }

    /// One explicit step; returns the mass that left through the boundary.
    fn step(&self, rho: &mut [f64], dt: f64, boundary: Boundary, scratch: &mut Scratch) -> f64 {
        let len = rho.len();
        let d = self.dim;
        for k in 0..d {
            for idx in 0..len {
                scratch.u[k][idx] = self.qdiag[k][idx] * rho[idx];
            }
        }
        if d == 2 {
            for idx in 0..len {
                scratch.w[idx] = self.qoff[idx] * rho[idx];
            }
        }
        let mut leak = 0.0;
        for k in 0..d {
            let area: f64 = (0..d).filter(|l| *l != k).map(|l| self.dx[l]).product();
            let st = self.stride[k];
            let u = &scratch.u[k];
            for idx in 0..len {
                let i = self.axis_index(idx, k);
                let inner = i + 1 < self.n[k];
                let cross = |nb: Option<usize>| -> f64 {
                    if d != 2 {
                        return 0.0;
                    }
                    let l = 1 - k;
                    let mut c = self.cross_value(&scratch.w, idx, l, 1) - self.cross_value(&scratch.w, idx, l, -1);
                    if let Some(nb) = nb {
                        c += self.cross_value(&scratch.w, nb, l, 1) - self.cross_value(&scratch.w, nb, l, -1);
                    }
                    -c / (4.0 * self.dx[l])
                };
                scratch.flux[k][idx] = if inner {
                    (self.right_m[k][idx] * u[idx] - self.right_p[k][idx] * u[idx + st]) / self.dx[k]
                        + cross(Some(idx + st))
                } else {
                    match boundary {
                        Boundary::Reflecting => 0.0,
                        Boundary::Absorbing => self.right_m[k][idx] * u[idx] / self.dx[k] + cross(None),
                    }
                };
                if !inner {
                    leak += dt * scratch.flux[k][idx] * area;
                }
                if i == 0 {
                    scratch.left[k][idx] = match boundary {
                        Boundary::Reflecting => 0.0,
                        Boundary::Absorbing => -self.left_p[k][idx] * u[idx] / self.dx[k] + cross(None),
                    };
                    leak -= dt * scratch.left[k][idx] * area;
                }
            }
        }
        for idx in 0..len {
            let mut div = 0.0;
            for k in 0..d {
                let i = self.axis_index(idx, k);
                let left = if i == 0 { scratch.left[k][idx] } else { scratch.flux[k][idx - self.stride[k]] };
                div += (scratch.flux[k][idx] - left) / self.dx[k];
            }
            let v = rho[idx] - dt * div;
            rho[idx] = if v.abs() < FLUSH { 0.0 } else { v };
        }
        leak
    }
}

struct Scratch {
    u: Vec<Vec<f64>>,
    w: Vec<f64>,
    flux: Vec<Vec<f64>>,
    left: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(d: usize, len: usize) -> Self {
        Self {
            u: vec![vec![0.0; len]; d],
            w: vec![0.0; len],
            flux: vec![vec![0.0; len]; d],
            left: vec![vec![0.0; len]; d],
        }
    }
}

/// Admissible explicit step of the scheme for `field` at time `tau`.
pub fn cfl_step(field: &CoefficientField, grid: &SpaceGrid, tau: f64) -> Result<f64> {
    Ok(Operator::build(field, grid, tau)?.cfl())
}

fn check_setup(field: &CoefficientField, cfg: &FdConfig, x0: &[f64]) -> Result<()> {
    let d = field.dim();
    if d == 0 || d > 2 {
        return Err(Error::Configuration(format!("finite differences support d ∈ {{1, 2}}, got d = {d}")));
    }
    if cfg.grid.dim() != d || x0.len() != d {
        return Err(Error::Configuration("grid, start point and field dimensions differ".into()));
    }
    for k in 0..d {
        let margin = 10.0 * cfg.grid.spacing(k);
        if x0[k] < cfg.grid.lo[k] + margin || x0[k] > cfg.grid.hi[k] - margin {
            return Err(Error::Configuration(format!("x0[{k}] = {} is within 10 cells of the box boundary", x0[k])));
        }
    }
    Ok(())
}

/// `δ_{x₀}` mollified to a Gaussian of width two cells, discretely normalized.
fn initial_condition(grid: &SpaceGrid, x0: &[f64]) -> Vec<f64> {
    let mut rho: Vec<f64> = (0..grid.len())
        .map(|idx| {
            let y = grid.point(idx);
            let e: f64 = (0..grid.dim())
                .map(|k| {
                    let w = 2.0 * grid.spacing(k);
                    let z = (y[k] - x0[k]) / w;
                    0.5 * z * z
                })
                .sum();
            (-e).exp()
        })
        .collect();
    let mass: f64 = rho.iter().sum::<f64>() * grid.cell_volume();
    for v in rho.iter_mut() {
        *v /= mass;
        if *v < FLUSH {
            *v = 0.0;
        }
    }
    rho
}

struct Evolution {
    rho: Vec<f64>,
    leaked: f64,
    steps: usize,
    dt_max: f64,
}

/// Advances from forward time `tau0` through each of `stops` (increasing),
/// invoking `record` at every stop.
fn evolve(
    field: &CoefficientField,
    cfg: &FdConfig,
    x0: &[f64],
    tau0: f64,
    stops: &[f64],
    mut record: impl FnMut(usize, &[f64], f64),
) -> Result<Evolution> {
    let grid = &cfg.grid;
    let mut op = Operator::build(field, grid, tau0)?;
    let cfl = op.cfl();
    let dt_max = match cfg.dt {
        Some(dt) if dt > cfl => {
            return Err(Error::Configuration(format!(
                "dt = {dt:e} exceeds the admissible explicit step {cfl:e} for this grid"
            )))
        }
        Some(dt) if dt > 0.0 => dt,
        Some(dt) => return Err(Error::Configuration(format!("dt must be positive, got {dt}"))),
        None => 0.9 * cfl,
    };
    let mut ev = Evolution { rho: initial_condition(grid, x0), leaked: 0.0, steps: 0, dt_max };
    let mut scratch = Scratch::new(grid.dim(), grid.len());
    let mut tau = tau0;
    for (j, &stop) in stops.iter().enumerate() {
        let span = stop - tau;
        if span > 0.0 {
            let n = (span / dt_max).ceil() as usize;
            let dt = span / n as f64;
            for s in 0..n {
                let t_here = tau + s as f64 * dt;
                if !field.is_autonomous() && (s > 0 || ev.steps > 0) {
                    op = Operator::build(field, grid, t_here)?;
                }
                let local = if field.is_autonomous() { cfl } else { op.cfl() };
                let sub = if dt > local { (dt / (0.9 * local)).ceil() as usize } else { 1 };
                for _ in 0..sub {
                    ev.leaked += op.step(&mut ev.rho, dt / sub as f64, cfg.boundary, &mut scratch);
                    ev.steps += 1;
                }
            }
            tau = stop;
        }
        record(j, &ev.rho, ev.leaked);
    }
    Ok(ev)
}

/// `(density, leakage, steps, largest step)` of one start time.
type SliceRun = (Vec<f64>, f64, usize, f64);

/// Density of `p_{t,s}(x₀, ·)` on `cfg.grid`.
pub fn solve_fokker_planck(
    field: &CoefficientField,
    s: f64,
    t: f64,
    x0: &[f64],
    cfg: &FdConfig,
) -> Result<DensityField> {
    solve_density_family(field, &[s], t, x0, cfg)
}

/// Slices `p_{t,s_j}(x₀, ·)` for every `s_j < t`. Time-independent fields
/// need one solve; otherwise one solve per start time, run concurrently.
pub fn solve_density_family(
    field: &CoefficientField,
    starts: &[f64],
    t: f64,
    x0: &[f64],
    cfg: &FdConfig,
) -> Result<DensityField> {
    check_setup(field, cfg, x0)?;
    if starts.is_empty() {
        return Err(Error::Configuration("no start times requested".into()));
    }
    for &s in starts {
        if !(s < t) {
            return Err(Error::Configuration(format!("start time {s} must precede the horizon {t}")));
        }
    }
    let len = cfg.grid.len();
    let mut values = vec![vec![0.0; len]; starts.len()];
    let mut leakage = vec![0.0; starts.len()];
    let steps;
    let dt_max;

    if field.is_autonomous() {
        let mut order: Vec<usize> = (0..starts.len()).collect();
        order.sort_by(|a, b| (t - starts[*a]).total_cmp(&(t - starts[*b])));
        let gaps: Vec<f64> = order.iter().map(|&j| t - starts[j]).collect();
        let ev = evolve(field, cfg, x0, 0.0, &gaps, |pos, rho, leak| {
            values[order[pos]].copy_from_slice(rho);
            leakage[order[pos]] = leak;
        })?;
        steps = ev.steps;
        dt_max = ev.dt_max;
    } else {
        let runs: Vec<Result<SliceRun>> = starts
            .par_iter()
            .map(|&s| {
                let mut out = (Vec::new(), 0.0);
                let ev = evolve(field, cfg, x0, s, &[t], |_, rho, leak| out = (rho.to_vec(), leak))?;
                Ok((out.0, out.1, ev.steps, ev.dt_max))
            })
            .collect();
        let mut total = 0;
        let mut dtm: f64 = 0.0;
        for (j, r) in runs.into_iter().enumerate() {
            let (rho, leak, st, dt) = r?;
            values[j] = rho;
            leakage[j] = leak;
            total += st;
            dtm = dtm.max(dt);
        }
        steps = total;
        dt_max = dtm;
    }

    Ok(DensityField::new(
        cfg.grid.clone(),
        starts.to_vec(),
        t,
        x0.to_vec(),
        field.label().to_string(),
        Provenance::Fd { dt: dt_max, boundary: cfg.boundary, steps },
        values,
        leakage,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density_lab::oracle;
    use crate::operator_model::{brownian, ornstein_uhlenbeck};

    #[test]
    fn bernoulli_limits() {
        assert_eq!(bernoulli(0.0), 1.0);
        assert!((bernoulli(1e-7) - 1.0 / (1.0 + 0.5e-7)).abs() < 1e-14);
        assert!((bernoulli(2.0) - 2.0 / (2f64.exp() - 1.0)).abs() < 1e-15);
        assert!((bernoulli(-30.0) - 30.0).abs() < 1e-10);
    }

    fn sup_error(num: &DensityField, exact: impl Fn(&[f64]) -> f64) -> f64 {
        (0..num.grid.len()).map(|i| (num.slice(0)[i] - exact(&num.grid.point(i))).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn heat_kernel_coarse() {
        let cfg = FdConfig { grid: SpaceGrid::cube(1, 6.0, 241).unwrap(), dt: None, boundary: Boundary::Absorbing };
        let rho = solve_fokker_planck(&brownian(1, 0.5), 0.5, 1.0, &[0.0], &cfg).unwrap();
        let err = sup_error(&rho, |y| oracle::gaussian_density(&[0.0], 0.5, y));
        // The two-cell initial mollifier dominates at this resolution.
        assert!(err < 8e-3, "{err}");
        assert!(rho.min_value() >= 0.0);
        assert!(rho.mass[0] <= 1.0 + 1e-6 && rho.mass[0] >= 1.0 - rho.leakage[0] - 1e-6);
    }

    #[test]
    fn refinement_reduces_ou_error() {
        let field = ornstein_uhlenbeck(1, 1.0, 1.0);
        let gap = std::f64::consts::LN_2;
        let (m, v) = oracle::ou_law(1.0, 1.0, &[0.5], gap);
        let errs: Vec<f64> = [121, 241, 481]
            .iter()
            .map(|&n| {
                let cfg =
                    FdConfig { grid: SpaceGrid::cube(1, 6.0, n).unwrap(), dt: None, boundary: Boundary::Absorbing };
                let rho = solve_fokker_planck(&field, 1.0 - gap, 1.0, &[0.5], &cfg).unwrap();
                sup_error(&rho, |y| oracle::gaussian_density(&m, v, y))
            })
            .collect();
        assert!(errs[0] / errs[1] >= 3.0 && errs[1] / errs[2] >= 3.0, "{errs:?}");
    }

    #[test]
    fn reflecting_conserves_mass() {
        let cfg = FdConfig { grid: SpaceGrid::cube(1, 2.0, 81).unwrap(), dt: None, boundary: Boundary::Reflecting };
        let rho = solve_density_family(&ornstein_uhlenbeck(1, 1.0, 1.0), &[0.0, 0.5, 0.9], 1.0, &[0.5], &cfg).unwrap();
        for j in 0..3 {
            let rect: f64 = rho.slice(j).iter().sum::<f64>() * rho.grid.spacing(0);
            assert!((rect - 1.0).abs() < 1e-9, "{rect}");
            assert_eq!(rho.leakage[j], 0.0);
        }
    }

    #[test]
    fn cfl_violation_is_reported() {
        let cfg =
            FdConfig { grid: SpaceGrid::cube(1, 6.0, 121).unwrap(), dt: Some(0.1), boundary: Boundary::Absorbing };
        match solve_fokker_planck(&brownian(1, 0.5), 0.0, 1.0, &[0.0], &cfg) {
            Err(Error::Configuration(msg)) => assert!(msg.contains("admissible")),
            other => panic!("{:?}", other.map(|d| d.mass)),
        }
    }

    #[test]
    fn two_dimensional_ou() {
        let cfg = FdConfig { grid: SpaceGrid::cube(2, 4.0, 81).unwrap(), dt: None, boundary: Boundary::Absorbing };
        let field = ornstein_uhlenbeck(2, 1.0, 1.0);
        let rho = solve_fokker_planck(&field, 0.5, 1.0, &[0.5, -0.5], &cfg).unwrap();
        let law = oracle::ou_law(1.0, 1.0, &[0.5, -0.5], 0.5);
        let err = sup_error(&rho, |y| oracle::gaussian_density(&law.0, law.1, y));
        assert!(err < 1e-2, "{err}");
        assert!(rho.min_value() >= 0.0);
    }

    #[test]
    fn nonautonomous_matches_autonomous() {
        let ou = ornstein_uhlenbeck(1, 1.0, 1.0);
        let inner = ou.clone();
        let nonauto = CoefficientField::new(
            1,
            1.0,
            move |t, x, q: &mut [f64]| inner.diffusion_into(t, x, q),
            |_, x: &[f64], f: &mut [f64]| f[0] = -x[0],
        );
        let cfg =
            FdConfig { grid: SpaceGrid::cube(1, 5.0, 101).unwrap(), dt: Some(5e-4), boundary: Boundary::Absorbing };
        let a = solve_density_family(&ou, &[0.2, 0.6], 1.0, &[0.0], &cfg).unwrap();
        let b = solve_density_family(&nonauto, &[0.2, 0.6], 1.0, &[0.0], &cfg).unwrap();
        for j in 0..2 {
            for (x, y) in a.slice(j).iter().zip(b.slice(j)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
