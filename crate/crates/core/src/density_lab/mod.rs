//! Transition densities `ρ(s,·) = p_{t,s}(x₀,·)` on tensor grids: kernel
//! density estimates from path ensembles, finite-difference forward solves,
//! closed-form oracles, and the drift functional `Γ(k,a,b)`.

mod fokker_planck;
mod gamma;
mod kde;
pub mod oracle;

pub use fokker_planck::{cfl_step, lyapunov_box_radius, solve_density_family, solve_fokker_planck, Boundary, FdConfig};
pub use gamma::{gamma_functional, GammaValue};
pub use kde::{kde_density, kde_split_error, Bandwidth};

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// Tensor grid of `n[k]` equally spaced nodes on `[lo[k], hi[k]]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

impl SpaceGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, n: Vec<usize>) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != n.len() || lo.is_empty() {
            return Err(Error::Input("grid bounds and node counts must share one dimension".into()));
        }
        for k in 0..lo.len() {
            if !(hi[k] > lo[k]) || n[k] < 2 {
                return Err(Error::Input(format!(
                    "axis {k}: need lo < hi and at least two nodes, got [{}, {}] with {}",
                    lo[k], hi[k], n[k]
                )));
            }
        }
        Ok(Self { lo, hi, n })
    }

    /// The box `[−r, r]^d` with `nodes` nodes per axis.
    pub fn cube(dim: usize, r: f64, nodes: usize) -> Result<Self> {
        Self::new(vec![-r; dim], vec![r; dim], vec![nodes; dim])
    }

    pub fn dim(&self) -> usize {
        self.n.len()
    }

    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, k: usize) -> f64 {
        (self.hi[k] - self.lo[k]) / (self.n[k] - 1) as f64
    }

    pub fn coord(&self, k: usize, i: usize) -> f64 {
        if i + 1 == self.n[k] {
            self.hi[k]
        } else {
            self.lo[k] + i as f64 * self.spacing(k)
        }
    }

    pub fn axis(&self, k: usize) -> Vec<f64> {
        (0..self.n[k]).map(|i| self.coord(k, i)).collect()
    }

    /// Multi-index of flat node `idx`; the last axis varies fastest.
    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            out[k] = idx % self.n[k];
            idx /= self.n[k];
        }
        out
    }

    pub fn flat_index(&self, mi: &[usize]) -> usize {
        mi.iter().zip(&self.n).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx).iter().enumerate().map(|(k, &i)| self.coord(k, i)).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.spacing(k)).product()
    }

    /// Tensor trapezoid weight of node `idx`.
    pub fn trapezoid_weight(&self, idx: usize) -> f64 {
        let mi = self.multi_index(idx);
        let mut w = self.cell_volume();
        for (k, &i) in mi.iter().enumerate() {
            if i == 0 || i + 1 == self.n[k] {
                w *= 0.5;
            }
        }
        w
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter().enumerate().all(|(k, v)| *v >= self.lo[k] && *v <= self.hi[k])
    }

    /// Multilinear interpolation of nodal `values` at `y`; 0 outside the box.
    pub fn interpolate(&self, values: &[f64], y: &[f64]) -> f64 {
        if !self.contains(y) {
            return 0.0;
        }
        let d = self.dim();
        let mut base = vec![0; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            let pos = (y[k] - self.lo[k]) / self.spacing(k);
            let i = (pos.floor() as usize).min(self.n[k] - 2);
            base[k] = i;
            frac[k] = (pos - i as f64).clamp(0.0, 1.0);
        }
        let mut acc = 0.0;
        let mut mi = vec![0; d];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            for k in 0..d {
                let bit = (corner >> k) & 1;
                mi[k] = base[k] + bit;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            if w != 0.0 {
                acc += w * values[self.flat_index(&mi)];
            }
        }
        acc
    }

    fn size_key(&self) -> (usize, Vec<u64>) {
        let mut bits: Vec<u64> = self.lo.iter().chain(&self.hi).map(|v| v.to_bits()).collect();
        bits.extend(self.n.iter().map(|v| *v as u64));
        (self.len(), bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "route", rename_all = "snake_case")]
pub enum Provenance {
    Kde { bandwidth: Vec<f64>, samples: Vec<usize> },
    Fd { dt: f64, boundary: Boundary, steps: usize },
    ClosedForm { law: String },
}

impl Provenance {
    pub fn route(&self) -> &'static str {
        match self {
            Provenance::Kde { .. } => "kde",
            Provenance::Fd { .. } => "fd",
            Provenance::ClosedForm { .. } => "closed_form",
        }
    }
}

/// Slices `ρ(s_j, ·)` of the kernel `p_{t,s_j}(x₀, ·)` for a fixed horizon.
#[derive(Debug, Clone, Serialize)]
pub struct DensityField {
    pub grid: SpaceGrid,
    pub starts: Vec<f64>,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub field_label: String,
    pub provenance: Provenance,
    /// Trapezoid mass of each slice.
    pub mass: Vec<f64>,
    /// Mass that left the box through absorbing boundaries.
    pub leakage: Vec<f64>,
    #[serde(skip)]
    pub values: Vec<Vec<f64>>,
}

impl DensityField {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: SpaceGrid,
        starts: Vec<f64>,
        horizon: f64,
        x0: Vec<f64>,
        field_label: String,
        provenance: Provenance,
        values: Vec<Vec<f64>>,
        leakage: Vec<f64>,
    ) -> Self {
        let mass = values.iter().map(|v| trapezoid_mass(&grid, v)).collect();
        Self { grid, starts, horizon, x0, field_label, provenance, mass, leakage, values }
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    /// Index of the slice with start time `s` (to within 1e-9).
    pub fn slice_index(&self, s: f64) -> Option<usize> {
        self.starts.iter().position(|v| (v - s).abs() <= 1e-9)
    }

    pub fn gap(&self, j: usize) -> f64 {
        self.horizon - self.starts[j]
    }

    pub fn value_at(&self, j: usize, y: &[f64]) -> f64 {
        self.grid.interpolate(&self.values[j], y)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    /// CSV with columns `s, y1.., rho`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["s".to_string()];
        header.extend((1..=self.grid.dim()).map(|k| format!("y{k}")));
        header.push("rho".into());
        wtr.write_record(&header)?;
        for (s, slice) in self.starts.iter().zip(&self.values) {
            for (idx, rho) in slice.iter().enumerate() {
                let mut row = vec![s.to_string()];
                row.extend(self.grid.point(idx).iter().map(|v| v.to_string()));
                row.push(rho.to_string());
                wtr.write_record(&row)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// JSON sidecar: grid, provenance, masses, leakage.
    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn trapezoid_mass(grid: &SpaceGrid, values: &[f64]) -> f64 {
    values.iter().enumerate().map(|(i, v)| v * grid.trapezoid_weight(i)).sum()
}

/// gnuplot script drawing each slice of a one-dimensional density CSV, on a
/// linear axis or (with `log_scale`) a logarithmic one for the tails.
pub fn slice_plot_script(csv_name: &str, density: &DensityField, log_scale: bool) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset key outside\n");
    s.push_str(&format!("set title '{} ({})'\n", density.field_label, density.provenance.route()));
    if log_scale {
        s.push_str("set logscale y\nset ylabel 'log rho'\n");
    } else {
        s.push_str("set ylabel 'rho'\n");
    }
    s.push_str("set xlabel 'y'\nplot \\\n");
    let lines: Vec<String> = density
        .starts
        .iter()
        .map(|st| {
            format!(
                "  '{csv_name}' using ($1=={st} ? $2 : 1/0):{col} with lines title 's={st}'",
                col = density.grid.dim() + 2
            )
        })
        .collect();
    s.push_str(&lines.join(", \\\n"));
    s.push('\n');
    s
}

/// Spatial region for comparisons: the ball `|y| ≤ radius`, restricted to
/// slices with start time in `s_range`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Region {
    pub radius: f64,
    pub s_range: Option<(f64, f64)>,
}

impl Region {
    pub fn everywhere() -> Self {
        Self { radius: f64::INFINITY, s_range: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SliceMetrics {
    pub s: f64,
    pub sup: f64,
    pub l1: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityMetrics {
    pub sup: f64,
    pub l1: f64,
    pub l2: f64,
    pub slices: Vec<SliceMetrics>,
}

/// Sup, L¹ and L² distances over `region`, worst slice reported. Slices
/// are matched by start time. On differing grids, `resample` interpolates
/// onto the grid with more nodes, which keeps the metric symmetric.
pub fn compare_densities(a: &DensityField, b: &DensityField, region: Region, resample: bool) -> Result<DensityMetrics> {
    if a.grid.dim() != b.grid.dim() {
        return Err(Error::Input("densities live in different dimensions".into()));
    }
    let same = a.grid == b.grid;
    if !same && !resample {
        return Err(Error::Input("density grids differ and resampling was not requested".into()));
    }
    let overlap = (0..a.grid.dim()).all(|k| a.grid.lo[k].max(b.grid.lo[k]) < a.grid.hi[k].min(b.grid.hi[k]));
    if !overlap {
        return Err(Error::Input("density grids are disjoint".into()));
    }
    let (fine, coarse) = if same || a.grid.size_key() >= b.grid.size_key() { (a, b) } else { (b, a) };
    let grid = &fine.grid;

    let mut slices = Vec::new();
    for (j, &s) in fine.starts.iter().enumerate() {
        if let Some((lo, hi)) = region.s_range {
            if s < lo - 1e-12 || s > hi + 1e-12 {
                continue;
            }
        }
        let Some(jc) = coarse.slice_index(s) else { continue };
        let mut m = SliceMetrics { s, sup: 0.0, l1: 0.0, l2: 0.0 };
        for idx in 0..grid.len() {
            let y = grid.point(idx);
            if crate::linalg::norm(&y) > region.radius {
                continue;
            }
            let other = if same { coarse.values[jc][idx] } else { coarse.value_at(jc, &y) };
            let diff = (fine.values[j][idx] - other).abs();
            let w = grid.trapezoid_weight(idx);
            m.sup = m.sup.max(diff);
            m.l1 += w * diff;
            m.l2 += w * diff * diff;
        }
        m.l2 = m.l2.sqrt();
        slices.push(m);
    }
    if slices.is_empty() {
        return Err(Error::Input("densities share no start time inside the region".into()));
    }
    slices.sort_by(|x, y| x.s.total_cmp(&y.s));
    let worst = |f: fn(&SliceMetrics) -> f64| slices.iter().map(f).fold(0.0, f64::max);
    Ok(DensityMetrics { sup: worst(|m| m.sup), l1: worst(|m| m.l1), l2: worst(|m| m.l2), slices })
}
