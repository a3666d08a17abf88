//! Dense row-major matrices and the handful of vector helpers the rest of
//! the crate needs. Hot loops (GRU rollouts, gradients) go through these
//! directly, so nothing here allocates unless it returns a new value.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    context: "matrix row",
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `out += self * x`
    #[inline]
    pub fn mul_vec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            *o += acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_acc(x, &mut out);
        out
    }

    /// `out += selfᵀ * y`
    #[inline]
    pub fn tr_mul_vec_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
    }

    /// `self += a bᵀ`
    #[inline]
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, bj) in row.iter_mut().zip(b) {
                *r += ai * bj;
            }
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                context: "matmul",
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension {
                context: "matrix subtraction",
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scaled(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    /// Absolute row sums, i.e. the induced ∞-norm of each row taken as a
    /// 1×cols matrix.
    pub fn row_abs_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum())
            .collect()
    }

    /// Induced ∞-norm (maximum absolute row sum).
    pub fn inf_norm(&self) -> f64 {
        self.row_abs_sums().into_iter().fold(0.0, f64::max)
    }

    /// Index of the first row attaining the induced ∞-norm.
    pub fn inf_norm_argmax(&self) -> usize {
        let sums = self.row_abs_sums();
        let mut best = 0;
        for (i, &s) in sums.iter().enumerate() {
            if s > sums[best] {
                best = i;
            }
        }
        best
    }

    pub(crate) fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// Eigenvalues of the symmetric part of a square matrix, ascending.
    pub fn symmetric_eigenvalues(&self) -> Result<Vec<f64>> {
        if self.rows != self.cols {
            return Err(Error::Dimension {
                context: "symmetric eigenvalues",
                expected: self.rows,
                got: self.cols,
            });
        }
        let m = self.to_nalgebra();
        let sym = (&m + m.transpose()) * 0.5;
        let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl core::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Induced ∞-norm of the horizontal concatenation `[a b c]` where `c` is a
/// column vector.
pub fn stacked_inf_norm(a: &Matrix, b: &Matrix, c: &[f64]) -> f64 {
    stacked_row_sums(a, b, c).into_iter().fold(0.0, f64::max)
}

pub(crate) fn stacked_row_sums(a: &Matrix, b: &Matrix, c: &[f64]) -> Vec<f64> {
    let ra = a.row_abs_sums();
    let rb = b.row_abs_sums();
    ra.iter().zip(&rb).zip(c).map(|((x, y), z)| x + y + z.abs()).collect()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `vᵀ Q v`
pub fn quad_form(q: &Matrix, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..q.rows() {
        let row = q.row(i);
        acc += v[i] * dot(row, v);
    }
    acc
}

/// `(Q + Qᵀ) v`, the gradient of `vᵀ Q v`.
pub fn quad_form_grad(q: &Matrix, v: &[f64], out: &mut [f64]) {
    q.mul_vec_acc(v, out);
    q.tr_mul_vec_acc(v, out);
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn inf_norm_is_max_abs_row_sum() {
        let m = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        assert_eq!(m.inf_norm(), 3.0);
        assert_eq!(m.row_abs_sums(), vec![3.0, 0.75]);
    }

    #[test]
    fn stacked_norm_includes_bias_column() {
        let a = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 0.5], vec![2.0, 0.0]]).unwrap();
        assert_eq!(stacked_inf_norm(&a, &b, &[-0.5, 1.0]), 3.0);
    }

    #[test]
    fn transpose_product_matches_explicit() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let mut out = vec![0.0; 3];
        m.tr_mul_vec_acc(&[1.0, -1.0], &mut out);
        assert_eq!(out, vec![-3.0, -3.0, -3.0]);
    }

    #[test]
    fn eigenvalues_of_diagonal() {
        let q = Matrix::from_diag(&[3.0, 1.0, 2.0]);
        assert_eq!(q.symmetric_eigenvalues().unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for &x in &[0.0, 0.3, 4.0, 30.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
