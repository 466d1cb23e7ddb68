//! Arithmetic for the integrability bootstrap and the Moser level-set
//! recursion.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;

use crate::error::{Error, Result};

/// `p = rk/(r + k − 1)`.
pub fn hest_exponent(r: f64, k: f64) -> Result<f64> {
    if !(r > 1.0 && k > 1.0) {
        return Err(Error::domain(format!("need r > 1 and k > 1, got r = {r}, k = {k}")));
    }
    Ok(r * k / (r + k - 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapTrace {
    pub d: usize,
    pub k: f64,
    /// `r₁, r₂, …`; an infinite entry means `1/r` reached zero.
    pub r: Vec<f64>,
    /// `p_n` for every `r_n` except the last.
    pub p: Vec<f64>,
    /// `1/r_n` as exact fractions.
    pub inv_r: Vec<String>,
    pub steps: usize,
    /// `(d+2−k)/(d+2)`, the limit of `1/r_n`.
    pub limit: f64,
}

const MAX_STEPS: usize = 100_000;

fn ratio_to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

fn invert(x: &BigRational) -> f64 {
    if x.is_positive() {
        ratio_to_f64(&x.recip())
    } else {
        f64::INFINITY
    }
}

/// Exact iteration of `1/r_{n+1} = (1/r_n)(1 − 1/k) + 1/k − 1/(d+2)` until
/// `r_n ≥ target`.
pub fn bootstrap_exponents_exact(
    d: usize,
    k: &BigRational,
    r1: &BigRational,
    target: &BigRational,
) -> Result<BootstrapTrace> {
    let one = BigRational::one();
    let dp2 = BigRational::from_integer(BigInt::from(d + 2));
    let upper = &dp2 / BigRational::from_integer(BigInt::from(d + 1));
    if !(k > &one) {
        return Err(Error::domain(format!("need k > 1, got {k}")));
    }
    if !(r1 > &one && r1 < &upper) {
        return Err(Error::domain(format!("need r1 in (1, (d+2)/(d+1)) = (1, {upper}), got {r1}")));
    }
    let limit = (&dp2 - k) / &dp2;
    let target_inv = if target.is_positive() { target.recip() } else { one.clone() };
    if limit.is_positive() && target_inv <= limit {
        return Err(Error::domain(format!(
            "target r = {target} is unreachable: 1/r_n decreases to the limit (d+2−k)/(d+2) = {limit}, so r_n stays below {}",
            limit.recip()
        )));
    }
    let inv_k = k.recip();
    let a = &one - &inv_k;
    let c = &inv_k - dp2.recip();
    let mut x = r1.recip();
    let mut inv = vec![x.clone()];
    let mut p = Vec::new();
    while x.is_positive() && x > target_inv {
        if inv.len() > MAX_STEPS {
            return Err(Error::domain(format!("no convergence to r = {target} within {MAX_STEPS} steps")));
        }
        p.push(ratio_to_f64(&(&one / (&inv_k + &a * &x))));
        x = &a * &x + &c;
        inv.push(x.clone());
    }
    Ok(BootstrapTrace {
        d,
        k: ratio_to_f64(k),
        r: inv.iter().map(invert).collect(),
        p,
        inv_r: inv
            .iter()
            .map(|v| if v.is_positive() { v.to_string() } else { BigRational::zero().to_string() })
            .collect(),
        steps: inv.len() - 1,
        limit: ratio_to_f64(&limit),
    })
}

fn to_ratio(x: f64, what: &str) -> Result<BigRational> {
    BigRational::from_float(x).ok_or_else(|| Error::domain(format!("{what} = {x} is not finite")))
}

/// Floating inputs are converted to their exact binary fractions and
/// iterated exactly.
pub fn bootstrap_exponents(d: usize, k: f64, r1: f64, target: f64) -> Result<BootstrapTrace> {
    let target = if target == f64::INFINITY { f64::MAX } else { target };
    bootstrap_exponents_exact(d, &to_ratio(k, "k")?, &to_ratio(r1, "r1")?, &to_ratio(target, "target")?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MoserThreshold {
    pub ell_bar: f64,
    pub y0_star: f64,
    /// `C = 2ℓ̄`.
    pub sup_constant: f64,
}

pub fn moser_threshold(nu: f64, alpha: f64) -> Result<MoserThreshold> {
    if !(nu > 0.0 && alpha > 0.0) {
        return Err(Error::domain(format!("need nu > 0 and alpha > 0, got {nu}, {alpha}")));
    }
    let ell_bar = (2f64.powf(1.0 + 1.0 / alpha) * nu.sqrt()).max(1.0);
    let y0_star = (4.0 * nu / (ell_bar * ell_bar)).powf(-1.0 / alpha) * 4f64.powf(-1.0 / (alpha * alpha));
    Ok(MoserThreshold { ell_bar, y0_star, sup_constant: 2.0 * ell_bar })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoserTrace {
    pub nu: f64,
    pub alpha: f64,
    pub ell_bar: f64,
    pub levels: Vec<f64>,
    pub y: Vec<f64>,
    pub threshold: f64,
    pub converged: bool,
}

pub const MOSER_ZERO: f64 = 1e-12;

/// Worst-case iterates `y_{n+1} = (4ν/ℓ̄²) 4ⁿ y_n^{1+α}`. Once a ratio
/// `y_{n+1}/y_n` drops to `4^{−1/α}`, later ratios can only shrink, so the
/// sequence decays at least geometrically.
pub fn moser_sequence(nu: f64, alpha: f64, y0: f64, n_max: usize) -> Result<MoserTrace> {
    let th = moser_threshold(nu, alpha)?;
    if !(y0 >= 0.0 && y0.is_finite()) {
        return Err(Error::domain(format!("y0 must be finite and nonnegative, got {y0}")));
    }
    let a = 4.0 * nu / (th.ell_bar * th.ell_bar);
    let contraction = 4f64.powf(-1.0 / alpha);
    let mut y = vec![y0];
    let mut geometric = y0 == 0.0;
    for n in 0..n_max {
        let prev = y[n];
        let next = a * 4f64.powi(n as i32) * prev.powf(1.0 + alpha);
        if prev > 0.0 && next / prev <= contraction {
            geometric = true;
        }
        y.push(next);
    }
    let last = *y.last().unwrap();
    let converged = last.is_finite() && (geometric || last <= MOSER_ZERO);
    let levels = (0..=n_max).map(|n| 2.0 * th.ell_bar - 2f64.powi(-(n as i32)) * th.ell_bar).collect();
    Ok(MoserTrace { nu, alpha, ell_bar: th.ell_bar, levels, y, threshold: th.y0_star, converged })
}

/// `n, value` rows.
pub fn write_trace_csv<W: std::io::Write>(out: W, column: &str, values: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["n", column])?;
    for (n, v) in values.iter().enumerate() {
        wtr.write_record([(n + 1).to_string(), v.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn hest() {
        assert!((hest_exponent(2.0, 2.0).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!((hest_exponent(3.0, 3.0).unwrap() - 1.8).abs() < 1e-15);
        assert!((hest_exponent(2.0, 1e6).unwrap() - 2.0).abs() <= 3e-6);
        assert!(hest_exponent(1.0, 2.0).is_err());
    }

    #[test]
    fn bootstrap_example() {
        let tr = bootstrap_exponents_exact(1, &q(2, 1), &q(6, 5), &q(2, 1)).unwrap();
        assert_eq!(tr.inv_r[1], "7/12");
        assert_eq!(tr.inv_r[2], "11/24");
        assert_eq!(tr.steps, 2);
        assert!((tr.limit - 1.0 / 3.0).abs() < 1e-15);
        let fl = bootstrap_exponents(1, 2.0, 1.2, 2.0).unwrap();
        assert!((fl.r[1] - 12.0 / 7.0).abs() < 1e-12 && (fl.r[2] - 24.0 / 11.0).abs() < 1e-12);
        assert!(bootstrap_exponents(1, 2.0, 1.2, 3.0).unwrap_err().to_string().contains("1/3"));
        let reach = bootstrap_exponents(1, 2.0, 1.2, 2.99).unwrap();
        assert!(*reach.r.last().unwrap() >= 2.99);
    }

    #[test]
    fn bootstrap_supercritical_and_trivial() {
        let tr = bootstrap_exponents(1, 4.0, 1.2, 1e9).unwrap();
        assert!((tr.limit + 1.0 / 3.0).abs() < 1e-15);
        assert!(*tr.r.last().unwrap() >= 1e9);
        let inf = bootstrap_exponents(1, 4.0, 1.2, f64::INFINITY).unwrap();
        assert_eq!(*inf.r.last().unwrap(), f64::INFINITY);
        let none = bootstrap_exponents(1, 2.0, 1.2, 1.2).unwrap();
        assert_eq!(none.steps, 0);
        assert!(none.p.is_empty());
        assert!(bootstrap_exponents(1, 2.0, 1.5, 2.0).is_err());
    }

    #[test]
    fn moser_examples() {
        let th = moser_threshold(1.0, 1.0).unwrap();
        assert_eq!((th.ell_bar, th.y0_star, th.sup_constant), (4.0, 1.0, 8.0));
        assert_eq!(moser_threshold(1.0, 0.1).unwrap().ell_bar, 2048.0);
        assert_eq!(moser_threshold(1e-4, 1.0).unwrap().ell_bar, 1.0);

        let tr = moser_sequence(1.0, 1.0, 1.0, 10).unwrap();
        assert_eq!(&tr.y[..4], &[1.0, 0.25, 0.0625, 0.015625]);
        assert!(tr.converged);
        assert_eq!(tr.levels[0], 4.0);
        assert_eq!(tr.levels[1], 6.0);
        let zero = moser_sequence(1.0, 1.0, 0.0, 5).unwrap();
        assert!(zero.converged && zero.y.iter().all(|v| *v == 0.0));
        let big = moser_sequence(1.0, 1.0, 10.0, 40).unwrap();
        assert!(!big.converged);
    }
}
