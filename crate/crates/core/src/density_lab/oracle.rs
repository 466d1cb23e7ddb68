//! Closed-form transition laws used as test oracles.

use super::{DensityField, Provenance, SpaceGrid};

/// Density of `N(mean, var·I)` at `y`.
pub fn gaussian_density(mean: &[f64], var: f64, y: &[f64]) -> f64 {
    let d = mean.len() as f64;
    let r2: f64 = mean.iter().zip(y).map(|(m, v)| (v - m) * (v - m)).sum();
    (-0.5 * r2 / var).exp() / (2.0 * std::f64::consts::PI * var).powf(0.5 * d)
}

/// Law after time `gap` of the diffusion with generator `qΔ`: `N(x₀, 2q·gap)`.
pub fn brownian_law(q: f64, x0: &[f64], gap: f64) -> (Vec<f64>, f64) {
    (x0.to_vec(), 2.0 * q * gap)
}

/// Law after time `gap` of `qΔ − θx·∇`:
/// `N(x₀e^{−θ·gap}, (q/θ)(1 − e^{−2θ·gap}))`.
pub fn ou_law(theta: f64, q: f64, x0: &[f64], gap: f64) -> (Vec<f64>, f64) {
    let decay = (-theta * gap).exp();
    (x0.iter().map(|x| x * decay).collect(), q / theta * (1.0 - decay * decay))
}

/// Closed-form slices `p_{t,s_j}(x₀,·)` for a Gaussian law family.
pub fn gaussian_field(
    grid: &SpaceGrid,
    starts: &[f64],
    t: f64,
    x0: &[f64],
    law_name: &str,
    law: impl Fn(f64) -> (Vec<f64>, f64),
) -> DensityField {
    let values = starts
        .iter()
        .map(|s| {
            let (mean, var) = law(t - s);
            (0..grid.len()).map(|i| gaussian_density(&mean, var, &grid.point(i))).collect()
        })
        .collect();
    DensityField::new(
        grid.clone(),
        starts.to_vec(),
        t,
        x0.to_vec(),
        law_name.to_string(),
        Provenance::ClosedForm { law: law_name.to_string() },
        values,
        vec![0.0; starts.len()],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laws() {
        let (m, v) = ou_law(1.0, 1.0, &[0.0], std::f64::consts::LN_2);
        assert_eq!(m, vec![0.0]);
        assert!((v - 0.75).abs() < 1e-15);
        assert_eq!(brownian_law(0.5, &[1.0], 0.5).1, 0.5);
        assert!((gaussian_density(&[0.0], 1.0, &[0.0]) - 0.398_942_280_401_432_7).abs() < 1e-15);
    }
}
