//! Gaussian product-kernel density estimates of terminal ensembles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compare_densities, DensityField, Provenance, Region, SpaceGrid};
use crate::error::{Error, Result};
use crate::sde_engine::PathEnsemble;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `h_k = σ̂_k N^{−1/(d+4)}`.
    #[default]
    Scott,
    /// One bandwidth per axis.
    Fixed(Vec<f64>),
}

const KERNEL_REACH: f64 = 8.0;
const SAMPLE_CHUNK: usize = 16_384;

fn scott(points: &[&[f64]], d: usize) -> Vec<f64> {
    let n = points.len() as f64;
    (0..d)
        .map(|k| {
            let xs: Vec<f64> = points.iter().map(|p| p[k]).collect();
            let mean = crate::linalg::pairwise_sum(&xs) / n;
            let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
            let sd = (crate::linalg::pairwise_sum(&sq) / (n - 1.0).max(1.0)).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            sd * n.powf(-1.0 / (d as f64 + 4.0))
        })
        .collect()
}

/// Nodes of axis `k` within reach of `x` and their kernel factors.
fn axis_weights(grid: &SpaceGrid, k: usize, x: f64, h: f64, out: &mut Vec<(usize, f64)>) {
    out.clear();
    let dx = grid.spacing(k);
    let lo = ((x - KERNEL_REACH * h - grid.lo[k]) / dx).ceil().max(0.0);
    let hi = ((x + KERNEL_REACH * h - grid.lo[k]) / dx).floor().min((grid.n[k] - 1) as f64);
    if lo > hi {
        return;
    }
    for i in lo as usize..=hi as usize {
        let z = (grid.coord(k, i) - x) / h;
        out.push((i, (-0.5 * z * z).exp()));
    }
}

fn accumulate(grid: &SpaceGrid, points: &[&[f64]], h: &[f64], acc: &mut [f64]) {
    let d = grid.dim();
    let mut axes: Vec<Vec<(usize, f64)>> = vec![Vec::new(); d];
    let mut mi = vec![0; d];
    for p in points {
        for k in 0..d {
            axis_weights(grid, k, p[k], h[k], &mut axes[k]);
        }
        if axes.iter().any(|a| a.is_empty()) {
            continue;
        }
        if d == 1 {
            for &(i, w) in &axes[0] {
                acc[i] += w;
            }
            continue;
        }
        let combos: usize = axes.iter().map(|a| a.len()).product();
        for c in 0..combos {
            let mut rem = c;
            let mut w = 1.0;
            for k in (0..d).rev() {
                let (i, wk) = axes[k][rem % axes[k].len()];
                rem /= axes[k].len();
                mi[k] = i;
                w *= wk;
            }
            acc[grid.flat_index(&mi)] += w;
        }
    }
}

fn kde_slice(points: &[&[f64]], d: usize, bandwidth: &Bandwidth, grid: &SpaceGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.is_empty() {
        return Err(Error::Input("cannot estimate a density from an empty ensemble".into()));
    }
    let h = match bandwidth {
        Bandwidth::Scott => scott(points, d),
        Bandwidth::Fixed(h) => {
            if h.len() != d || h.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Input(format!("need {d} positive bandwidths, got {h:?}")));
            }
            h.clone()
        }
    };
    let partials: Vec<Vec<f64>> = points
        .par_chunks(SAMPLE_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; grid.len()];
            accumulate(grid, chunk, &h, &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; grid.len()];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    let norm = points.len() as f64 * h.iter().product::<f64>() * (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0);
    for v in total.iter_mut() {
        *v /= norm;
    }
    Ok((total, h))
}

/// One slice per ensemble; all ensembles must share `(t, x₀)`.
pub fn kde_density(
    ensembles: &[PathEnsemble],
    bandwidth: &Bandwidth,
    grid: &SpaceGrid,
    label: &str,
) -> Result<DensityField> {
    let first = ensembles.first().ok_or_else(|| Error::Input("no ensembles supplied".into()))?;
    let d = first.dim;
    if grid.dim() != d {
        return Err(Error::Input(format!("grid dimension {} does not match ensemble dimension {d}", grid.dim())));
    }
    let mut values = Vec::new();
    let mut used = Vec::new();
    let mut samples = Vec::new();
    for e in ensembles {
        if e.horizon != first.horizon || e.x0 != first.x0 || e.dim != d {
            return Err(Error::Input("ensembles must share horizon, start point and dimension".into()));
        }
        let points: Vec<&[f64]> = e.valid_points().collect();
        let (slice, h) = kde_slice(&points, d, bandwidth, grid)?;
        values.push(slice);
        samples.push(points.len());
        used = h;
    }
    Ok(DensityField::new(
        grid.clone(),
        ensembles.iter().map(|e| e.start).collect(),
        first.horizon,
        first.x0.clone(),
        label.to_string(),
        Provenance::Kde { bandwidth: used, samples },
        values,
        vec![0.0; ensembles.len()],
    ))
}

/// Split-half estimate of the KDE's stochastic L¹ error: the L¹ distance
/// between estimates built from the even and odd paths, divided by √2.
pub fn kde_split_error(ensemble: &PathEnsemble, bandwidth: &Bandwidth, grid: &SpaceGrid) -> Result<f64> {
    let points: Vec<&[f64]> = ensemble.valid_points().collect();
    let full_h = match bandwidth {
        Bandwidth::Scott => scott(&points, ensemble.dim),
        Bandwidth::Fixed(h) => h.clone(),
    };
    // Each half uses the full-sample bandwidth scaled to its own size.
    let scale = 2f64.powf(1.0 / (ensemble.dim as f64 + 4.0));
    let half_bw = Bandwidth::Fixed(full_h.iter().map(|h| h * scale).collect());
    let even: Vec<&[f64]> = points.iter().step_by(2).copied().collect();
    let odd: Vec<&[f64]> = points.iter().skip(1).step_by(2).copied().collect();
    let (a, _) = kde_slice(&even, ensemble.dim, &half_bw, grid)?;
    let (b, _) = kde_slice(&odd, ensemble.dim, &half_bw, grid)?;
    let wrap = |v: Vec<f64>| {
        DensityField::new(
            grid.clone(),
            vec![0.0],
            1.0,
            vec![],
            String::new(),
            Provenance::ClosedForm { law: String::new() },
            vec![v],
            vec![0.0],
        )
    };
    let m = compare_densities(&wrap(a), &wrap(b), Region::everywhere(), false)?;
    Ok(m.l1 / 2f64.sqrt())
}
