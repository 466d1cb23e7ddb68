//! Small dense linear algebra for `d×d` coefficient matrices.
//!
//! Matrices are row-major `Vec<f64>` of length `d*d`. Dimensions stay small
//! (`d ≤ 4` in practice), so everything here is written for clarity and to
//! avoid allocation in hot loops.

use serde::Serialize;

use crate::error::{Error, Result};

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = c;
        }
        m
    }

    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::Input(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, v) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = *v;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn trace(&self) -> f64 {
        trace(&self.data, self.dim)
    }

    pub fn quad_form(&self, xi: &[f64]) -> f64 {
        quad_form(&self.data, self.dim, xi)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        mat_vec(&self.data, self.dim, v, &mut out);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `‖A − Aᵀ‖_∞` entrywise.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0_f64;
        for i in 0..d {
            for j in (i + 1)..d {
                worst = worst.max((self.data[i * d + j] - self.data[j * d + i]).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self) -> bool {
        self.asymmetry() <= 1e-12 * self.max_abs()
    }

    /// Lower-triangular Cholesky factor `L` with `L Lᵀ = self`.
    pub fn cholesky(&self) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.dim);
        cholesky_into(&self.data, self.dim, &mut out.data)?;
        Ok(out)
    }
}

pub fn trace(a: &[f64], d: usize) -> f64 {
    (0..d).map(|i| a[i * d + i]).sum()
}

pub fn quad_form(a: &[f64], d: usize, xi: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += a[i * d + j] * xi[j];
        }
        acc += xi[i] * row;
    }
    acc
}

pub fn mat_vec(a: &[f64], d: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += a[i * d + j] * v[j];
        }
        out[i] = acc;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cholesky–Banachiewicz factorization into a caller-provided buffer.
///
/// Only the lower triangle of `a` is read. On failure the error carries the
/// 1-based index of the first leading minor that is not positive.
pub fn cholesky_into(a: &[f64], d: usize, l: &mut [f64]) -> Result<()> {
    for v in l.iter_mut() {
        *v = 0.0;
    }
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(Error::Factorization { minor: i + 1, pivot: sum });
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Ok(())
}

/// Solves `A x = b` in place by Gaussian elimination with partial pivoting.
/// Returns `false` when the matrix is numerically singular.
pub fn solve_in_place(a: &mut [f64], d: usize, b: &mut [f64]) -> bool {
    for col in 0..d {
        let pivot_row = (col..d).max_by(|&r, &s| a[r * d + col].abs().total_cmp(&a[s * d + col].abs())).unwrap_or(col);
        if a[pivot_row * d + col].abs() < 1e-300 {
            return false;
        }
        if pivot_row != col {
            for k in 0..d {
                a.swap(col * d + k, pivot_row * d + k);
            }
            b.swap(col, pivot_row);
        }
        let p = a[col * d + col];
        for r in (col + 1)..d {
            let factor = a[r * d + col] / p;
            if factor != 0.0 {
                for k in col..d {
                    a[r * d + k] -= factor * a[col * d + k];
                }
                b[r] -= factor * b[col];
            }
        }
    }
    for row in (0..d).rev() {
        let mut acc = b[row];
        for k in (row + 1)..d {
            acc -= a[row * d + k] * b[k];
        }
        b[row] = acc / a[row * d + row];
    }
    true
}

/// Pairwise (cascade) summation: fixed association order, independent of
/// how the input was produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean and standard error of the mean, both via pairwise summation.
pub fn mean_and_standard_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_identity_scaled() {
        let l = Matrix::scaled_identity(2, 2.0).cholesky().unwrap();
        assert!((l.get(0, 0) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l.get(1, 0), 0.0);
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = Matrix::from_row_major(3, vec![4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0]).unwrap();
        let l = a.cholesky().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l.get(i, k) * l.get(j, k)).sum();
                assert!((v - a.get(i, j)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn cholesky_reports_minor() {
        let a = Matrix::from_row_major(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        match a.cholesky() {
            Err(Error::Factorization { minor, pivot }) => {
                assert_eq!(minor, 2);
                assert!(pivot < 0.0);
            }
            other => panic!("expected factorization error, got {other:?}"),
        }
    }

    #[test]
    fn gaussian_elimination() {
        let mut a = vec![0.0, 2.0, 1.0, 1.0];
        let mut b = vec![4.0, 3.0];
        assert!(solve_in_place(&mut a, 2, &mut b));
        assert!((b[0] - 1.0).abs() < 1e-15 && (b[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499500.0);
    }
}
