//! Closed-form generator ratios against a finite-difference Hessian of
//! `G = exp(uυ)`, evaluated through differences of `log G` so that large
//! `|x|` does not overflow.

#![allow(clippy::needless_range_loop)]

use driftlab_core::linalg::{self, Matrix};
use driftlab_core::lyapunov::{apply_generator, generator_ratio, smooth_radial_power, ExpRadialFn, RadialProfile};
use driftlab_core::operator_model::{
    brownian, make_polynomial, ornstein_uhlenbeck, BaseDiffusion, CoefficientField, CoercivityRate, GrowthParams,
};

/// `υ(y) − υ(x)` without cancellation, from `ρ = |x|²` and
/// `ρ_y − ρ_x = Σ (y_i − x_i)(y_i + x_i)`.
fn profile_increment(p: &RadialProfile, x: &[f64], y: &[f64]) -> f64 {
    let rx: f64 = x.iter().map(|c| c * c).sum();
    let dr: f64 = x.iter().zip(y).map(|(a, b)| (b - a) * (b + a)).sum();
    let ry = rx + dr;
    let inner_inc = |r0: f64, d: f64| d * (p.b_c + p.c * (2.0 * r0 + d));
    let outer_inc = |r0: f64, d: f64| r0.powf(0.5 * p.beta) * (0.5 * p.beta * (d / r0).ln_1p()).exp_m1();
    match (rx >= 1.0, ry >= 1.0) {
        (true, true) => outer_inc(rx, dr),
        (false, false) => inner_inc(rx, dr),
        // Split at |x| = 1; the C¹ match makes the split insensitive to rounding in ρ.
        (false, true) => inner_inc(rx, 1.0 - rx) + outer_inc(1.0, dr - (1.0 - rx)),
        (true, false) => outer_inc(rx, 1.0 - rx) + inner_inc(1.0, dr - (1.0 - rx)),
    }
}

/// `(A G / G, scale)` where `scale = |Σ q_ij D_ijG/G| + |F·∇G/G|`. Steps
/// are powers of two so that `x ± h` is exact.
fn fd_ratio(field: &CoefficientField, g: &ExpRadialFn, t: f64, x: &[f64]) -> (f64, f64) {
    let d = x.len();
    let r = linalg::norm(x);
    let der = g.profile.derivatives(r);
    let slope = (g.rate * der.d1).abs().max((g.rate * der.d2).abs().sqrt()).max(1.0);
    let h = 2f64.powi((1e-6 / slope).log2().floor() as i32);
    // exp(ℓ(x + off·h) − ℓ(x)) − 1
    let e = |off: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for (k, s) in off {
            y[*k] += s * h;
        }
        (g.rate * profile_increment(&g.profile, x, &y)).exp_m1()
    };
    let q = field.diffusion(t, x).unwrap();
    let f = field.drift(t, x).unwrap();
    let mut second = 0.0;
    let mut first = 0.0;
    for i in 0..d {
        for j in 0..d {
            let dij = if i == j {
                (e(&[(i, 1.0)]) + e(&[(i, -1.0)])) / (h * h)
            } else {
                ((e(&[(i, 1.0), (j, 1.0)]) - e(&[(i, 1.0), (j, -1.0)]))
                    - (e(&[(i, -1.0), (j, 1.0)]) - e(&[(i, -1.0), (j, -1.0)])))
                    / (4.0 * h * h)
            };
            second += q.get(i, j) * dij;
        }
        first += f[i] * (e(&[(i, 1.0)]) - e(&[(i, -1.0)])) / (2.0 * h);
    }
    (second + first, second.abs() + first.abs())
}

fn params(m: f64, p: f64) -> GrowthParams {
    GrowthParams::new(m, p, 1.0, 1.0, 1.0, CoercivityRate::constant(1.0)).unwrap()
}

fn probes(d: usize) -> Vec<Vec<f64>> {
    let radii = [0.1, 0.5, 0.99, 1.0, 1.01, 2.0, 5.0, 10.0, 20.0];
    let dirs: Vec<Vec<f64>> = if d == 1 {
        vec![vec![1.0], vec![-1.0]]
    } else {
        [0.3_f64, 1.2, 2.5, 4.0].iter().map(|a| vec![a.cos(), a.sin()]).collect()
    };
    radii.iter().flat_map(|r| dirs.iter().map(move |u| u.iter().map(|c| c * r).collect())).collect()
}

fn check(field: &CoefficientField, beta: f64, rate: f64) {
    let g = ExpRadialFn::new(smooth_radial_power(beta).unwrap(), rate);
    for t in [0.0, 0.3, 0.9] {
        for x in probes(field.dim()) {
            let closed = generator_ratio(field, &g, t, &x).unwrap().full;
            let (fd, scale) = fd_ratio(field, &g, t, &x);
            let rel = (closed - fd).abs() / scale.max(1e-300);
            assert!(rel <= 1e-6, "{}: beta {beta} t {t} x {x:?}: closed {closed} fd {fd} rel {rel:e}", field.label());
        }
    }
}

#[test]
fn example_family_one_dimensional() {
    for (m, p) in [(0.0, 3.0), (2.0, 3.0), (1.0, 2.5)] {
        let pr = params(m, p);
        let field = make_polynomial(1, &pr, BaseDiffusion::scaled_identity(1, 1.0)).unwrap();
        check(&field, pr.beta(), 0.2);
    }
}

#[test]
fn example_family_anisotropic_plane() {
    let q0 = Matrix::from_row_major(2, vec![1.5, 0.3, 0.3, 1.0]).unwrap();
    for (m, p) in [(0.0, 3.0), (2.0, 3.0), (0.5, 2.0)] {
        let pr = params(m, p);
        let field = make_polynomial(2, &pr, BaseDiffusion::constant(q0.clone(), 0.8)).unwrap();
        check(&field, pr.beta(), 0.1);
    }
}

#[test]
fn time_dependent_coefficients() {
    let b = CoercivityRate::function(|t, x| 1.0 + t + 0.1 * linalg::norm(x).min(1.0));
    let pr = GrowthParams::new(0.0, 3.0, 1.0, 1.0, 1.0, b).unwrap();
    let q0 = BaseDiffusion::function(2, 1.0, |t, x, out| {
        out.copy_from_slice(&[1.5 + t, 0.2 * x[0].tanh(), 0.2 * x[0].tanh(), 1.2]);
    });
    let field = make_polynomial(2, &pr, q0).unwrap();
    check(&field, 4.0, 0.15);
}

#[test]
fn gaussian_oracles() {
    check(&brownian(2, 0.5), 2.0, 0.3);
    check(&ornstein_uhlenbeck(1, 1.0, 1.0), 2.0, 0.3);
    check(&ornstein_uhlenbeck(2, 2.0, 0.5), 4.0, 0.05);
}

#[test]
fn value_form_matches_ratio_form() {
    let pr = params(0.0, 3.0);
    let field = make_polynomial(1, &pr, BaseDiffusion::scaled_identity(1, 1.0)).unwrap();
    let g = ExpRadialFn::new(smooth_radial_power(4.0).unwrap(), 0.2);
    for r in [0.0, 0.5, 1.5, 3.0] {
        let x = [r];
        let ratio = generator_ratio(&field, &g, 0.0, &x).unwrap().full;
        let value = apply_generator(&field, &g, 0.0, &x).unwrap();
        assert!((value - ratio * g.value(&x)).abs() <= 1e-12 * value.abs().max(1.0));
    }
    assert!(apply_generator(&field, &g, 0.0, &[60.0]).is_err());
}
