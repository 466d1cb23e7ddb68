//! Space–time probe grids: a time set crossed with radial shells.
//!
//! A shell grid is `times × ({0} ∪ radii × directions)`. The growth
//! hypotheses and Lyapunov inequalities are radial in character, so shells
//! at many radii along a modest direction set expose worst cases cheaply.

use serde::Serialize;

use crate::error::{Error, Result};

/// Evenly spaced values `start, start+step, …` up to `stop` (inclusive when
/// `stop` is hit within a relative `1e-9` step).
pub fn linspace_step(start: f64, stop: f64, step: f64) -> Vec<f64> {
    assert!(step > 0.0, "step must be positive");
    let n = ((stop - start) / step + 1e-9).floor();
    if n < 0.0 {
        return Vec::new();
    }
    (0..=n as usize).map(|i| start + i as f64 * step).collect()
}

/// Unit direction set for dimension `d`.
///
/// `d = 1`: `±1`; `d = 2`: 16 equally spaced angles; otherwise the signed
/// coordinate axes plus the normalised sign-diagonals (when `2^d ≤ 64`).
pub fn direction_set(d: usize) -> Vec<Vec<f64>> {
    match d {
        0 => Vec::new(),
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..16)
            .map(|k| {
                let th = k as f64 * std::f64::consts::PI / 8.0;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        _ => {
            let mut dirs = Vec::new();
            for i in 0..d {
                for sign in [1.0, -1.0] {
                    let mut v = vec![0.0; d];
                    v[i] = sign;
                    dirs.push(v);
                }
            }
            if d <= 6 {
                let s = 1.0 / (d as f64).sqrt();
                for mask in 0..(1u32 << d) {
                    dirs.push((0..d).map(|i| if mask & (1 << i) != 0 { -s } else { s }).collect());
                }
            }
            dirs
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ShellGrid {
    dim: usize,
    times: Vec<f64>,
    radii: Vec<f64>,
    directions: Vec<Vec<f64>>,
}

/// Serializable description of a grid (for reports).
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GridSpec {
    pub dim: usize,
    pub time_nodes: usize,
    pub time_range: (f64, f64),
    pub radial_nodes: usize,
    pub radius_max: f64,
    pub directions: usize,
}

impl ShellGrid {
    pub fn new(dim: usize, times: Vec<f64>, radii: Vec<f64>) -> Result<Self> {
        Self::with_directions(dim, times, radii, direction_set(dim))
    }

    pub fn with_directions(
        dim: usize,
        times: Vec<f64>,
        mut radii: Vec<f64>,
        directions: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("grid dimension must be positive".into()));
        }
        if times.is_empty() || radii.is_empty() {
            return Err(Error::Input("grid needs at least one time and one radius".into()));
        }
        if radii.iter().any(|r| *r < 0.0 || !r.is_finite()) {
            return Err(Error::Input("radii must be finite and nonnegative".into()));
        }
        if directions.iter().any(|v| v.len() != dim) || directions.is_empty() {
            return Err(Error::Input("direction vectors must match the grid dimension".into()));
        }
        radii.sort_by(f64::total_cmp);
        radii.dedup();
        Ok(Self { dim, times, radii, directions })
    }

    /// Uniform grid: times `t0, t0+dt, …, ≤ t1`, radii `0, dr, …, ≤ r_max`.
    pub fn uniform(dim: usize, t0: f64, t1: f64, dt: f64, r_max: f64, dr: f64) -> Result<Self> {
        Self::new(dim, linspace_step(t0, t1, dt), linspace_step(0.0, r_max, dr))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    pub fn radius_max(&self) -> f64 {
        *self.radii.last().expect("nonempty")
    }

    /// Spatial points of one time slice; the origin appears once.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut pts = Vec::with_capacity(self.radii.len() * self.directions.len());
        for &r in &self.radii {
            if r == 0.0 {
                pts.push(vec![0.0; self.dim]);
                continue;
            }
            for dir in &self.directions {
                pts.push(dir.iter().map(|c| c * r).collect());
            }
        }
        pts
    }

    /// Same grid with a different time set.
    pub fn with_times(&self, times: Vec<f64>) -> Self {
        Self { times, ..self.clone() }
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            dim: self.dim,
            time_nodes: self.times.len(),
            time_range: (
                self.times.iter().copied().fold(f64::INFINITY, f64::min),
                self.times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ),
            radial_nodes: self.radii.len(),
            radius_max: self.radius_max(),
            directions: self.directions.len(),
        }
    }
}
