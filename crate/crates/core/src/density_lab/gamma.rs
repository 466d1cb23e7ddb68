use serde::Serialize;

use super::DensityField;
use crate::error::{Error, Result};
use crate::linalg;
use crate::operator_model::CoefficientField;

/// `Γ(k,a,b) = (∫_a^b ∫ |F(s,y)|^k ρ(s,y) dy ds)^{1/k}` and the raw integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaValue {
    pub k: f64,
    pub window: (f64, f64),
    pub raw: f64,
    pub value: f64,
}

/// Trapezoid in `y` per slice; in `s` the piecewise-linear interpolant of
/// the slice integrals is integrated exactly over the window.
pub fn gamma_functional(
    density: &DensityField,
    field: &CoefficientField,
    k: f64,
    window: (f64, f64),
) -> Result<GammaValue> {
    if !(k >= 1.0) {
        return Err(Error::domain(format!("Γ needs k ≥ 1, got {k}")));
    }
    let (a, b) = window;
    let mut order: Vec<usize> = (0..density.starts.len()).collect();
    order.sort_by(|i, j| density.starts[*i].total_cmp(&density.starts[*j]));
    let s: Vec<f64> = order.iter().map(|&j| density.starts[j]).collect();
    if s.is_empty() || a > b || a < s[0] - 1e-12 || b > s[s.len() - 1] + 1e-12 {
        return Err(Error::Input(format!("window ({a}, {b}) is not inside the density's start-time range")));
    }
    let grid = &density.grid;
    let mut f = vec![0.0; grid.dim()];
    let slice_integral: Vec<f64> = order
        .iter()
        .map(|&j| {
            let sj = density.starts[j];
            (0..grid.len())
                .map(|idx| {
                    let y = grid.point(idx);
                    field.drift_into(sj, &y, &mut f);
                    linalg::norm(&f).powf(k) * density.values[j][idx] * grid.trapezoid_weight(idx)
                })
                .sum()
        })
        .collect();
    let interp = |x: f64| -> f64 {
        if s.len() == 1 {
            return slice_integral[0];
        }
        let i = s.partition_point(|v| *v <= x).clamp(1, s.len() - 1);
        let w = (x - s[i - 1]) / (s[i] - s[i - 1]);
        (1.0 - w) * slice_integral[i - 1] + w * slice_integral[i]
    };
    let mut raw = 0.0;
    let mut knots = vec![a];
    knots.extend(s.iter().copied().filter(|v| *v > a && *v < b));
    knots.push(b);
    for pair in knots.windows(2) {
        raw += 0.5 * (pair[1] - pair[0]) * (interp(pair[0]) + interp(pair[1]));
    }
    Ok(GammaValue { k, window, raw, value: raw.powf(1.0 / k) })
}
