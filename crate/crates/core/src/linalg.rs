//! Small dense row-major matrices and Cholesky machinery, generic over [`Real`].
//!
//! Desk-scale problems (M ≤ 32, N ≤ 200) never need blocked or sparse kernels.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{DgpError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::cst(1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Row-major construction; panics when `data.len() != rows * cols`.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[T]) -> Self {
        assert_eq!(data.len(), rows * cols, "row slice length");
        Mat {
            rows,
            cols,
            data: data.to_vec(),
        }
    }

    pub fn from_diagonal(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat<T>) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shapes");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// `self * selfᵀ`.
    pub fn outer_self(&self) -> Self {
        let n = self.rows;
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dot(self.row(i), self.row(j));
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec shapes");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ v`.
    pub fn tr_matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "tr_matvec shapes");
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn add(&self, other: &Mat<T>) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Mat<T>) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    pub fn trace(&self) -> T {
        let mut t = T::zero();
        for i in 0..self.rows.min(self.cols) {
            t += self[(i, i)];
        }
        t
    }

    pub fn values(&self) -> Mat<f64> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.val()).collect(),
        }
    }

    pub fn lift(m: &Mat<f64>) -> Self {
        Mat {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&v| T::cst(v)).collect(),
        }
    }

    /// Keeps only the lower triangle (diagonal included).
    pub fn lower_triangle(&self) -> Self {
        Mat::from_fn(self.rows, self.cols, |i, j| if j <= i { self[(i, j)] } else { T::zero() })
    }
}

impl Mat<f64> {
    pub fn max_abs_diff(&self, other: &Mat<f64>) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..self.rows {
            for j in 0..i {
                if (self[(i, j)] - self[(j, i)]).abs() > tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn norm_sq<T: Real>(a: &[T]) -> T {
    let mut s = T::zero();
    for &x in a {
        s += x.square();
    }
    s
}

/// Relative jitter factors; each is multiplied by the mean diagonal of the
/// matrix being factorised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterSchedule {
    pub factors: Vec<f64>,
}

impl Default for JitterSchedule {
    fn default() -> Self {
        JitterSchedule {
            factors: vec![1e-10, 1e-8, 1e-6],
        }
    }
}

impl JitterSchedule {
    /// Longer schedule used where conditioning inputs may coincide.
    pub fn extended() -> Self {
        JitterSchedule {
            factors: vec![1e-10, 1e-8, 1e-6, 1e-4, 1e-2],
        }
    }
}

/// Lower Cholesky factor of `A + jitter·I`.
#[derive(Clone, Debug)]
pub struct Cholesky<T = f64> {
    l: Mat<T>,
    jitter: f64,
}

/// Plain Cholesky of `a + jitter·I`; `None` when a pivot is not strictly positive.
pub fn cholesky<T: Real>(a: &Mat<T>, jitter: f64) -> Option<Mat<T>> {
    cholesky_shifted(a, T::cst(jitter))
}

fn cholesky_shifted<T: Real>(a: &Mat<T>, jitter: T) -> Option<Mat<T>> {
    let n = a.rows();
    debug_assert!(a.is_square());
    let mut l: Mat<T> = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)].square();
        }
        let dv = d.val();
        if !(dv > 0.0) || !dv.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Cholesky with the smallest jitter of `schedule` that succeeds.
pub fn chol_with_schedule<T: Real>(a: &Mat<T>, schedule: &JitterSchedule) -> Result<Cholesky<T>> {
    if !a.is_square() {
        return Err(DgpError::DimensionMismatch {
            what: "square matrix",
            expected: a.rows(),
            got: a.cols(),
        });
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Cholesky {
            l: Mat::zeros(0, 0),
            jitter: 0.0,
        });
    }
    // The jitter follows the diagonal so derivatives see it too.
    let mean_diag = a.trace() / T::cst(n as f64);
    let scale = if mean_diag.val() > 0.0 && mean_diag.val().is_finite() { mean_diag } else { T::cst(1.0) };
    let mut last = 0.0;
    for &f in &schedule.factors {
        let jitter = scale * T::cst(f);
        last = jitter.val();
        if let Some(l) = cholesky_shifted(a, jitter) {
            return Ok(Cholesky { l, jitter: last });
        }
    }
    Err(DgpError::NotPsd { jitter: last })
}

impl<T: Real> Cholesky<T> {
    /// Wraps an existing lower-triangular factor (diagonal assumed positive).
    pub fn from_factor(l: Mat<T>) -> Self {
        Cholesky { l, jitter: 0.0 }
    }

    pub fn factor(&self) -> &Mat<T> {
        &self.l
    }

    pub fn into_factor(self) -> Mat<T> {
        self.l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut x = b.to_vec();
        for i in 0..n {
            let row = self.l.row(i);
            let mut s = x[i];
            for k in 0..i {
                s -= row[k] * x[k];
            }
            x[i] = s / row[i];
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Column-wise `L⁻¹ B`.
    pub fn solve_lower_mat(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(b.rows(), self.dim());
        let mut out = Mat::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let x = self.solve_lower(&b.column(j));
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// Column-wise `(L Lᵀ)⁻¹ B`.
    pub fn solve_mat(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(b.rows(), self.dim());
        let mut out = Mat::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let x = self.solve(&b.column(j));
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// `ln det(L Lᵀ)`.
    pub fn log_det(&self) -> T {
        let mut s = T::zero();
        for i in 0..self.dim() {
            s += self.l[(i, i)].ln();
        }
        s * 2.0
    }

    /// `L x`.
    pub fn mul_lower(&self, x: &[T]) -> Vec<T> {
        let n = self.dim();
        assert_eq!(x.len(), n);
        (0..n)
            .map(|i| {
                let row = self.l.row(i);
                let mut s = T::zero();
                for k in 0..=i {
                    s += row[k] * x[k];
                }
                s
            })
            .collect()
    }

    /// Reconstructs `L Lᵀ` (including the jitter that was added).
    pub fn reconstruct(&self) -> Mat<T> {
        self.l.outer_self()
    }
}

/// `L x` for a lower-triangular `L` stored as a full matrix.
pub fn lower_mul<T: Real>(l: &Mat<T>, x: &[T]) -> Vec<T> {
    let n = l.rows();
    assert_eq!(x.len(), n);
    (0..n)
        .map(|i| {
            let row = l.row(i);
            let mut s = T::zero();
            for k in 0..=i {
                s += row[k] * x[k];
            }
            s
        })
        .collect()
}

/// `Lᵀ x` for a lower-triangular `L`.
pub fn lower_tr_mul<T: Real>(l: &Mat<T>, x: &[T]) -> Vec<T> {
    let n = l.rows();
    assert_eq!(x.len(), n);
    let mut out = vec![T::zero(); n];
    for (i, &xi) in x.iter().enumerate() {
        let row = l.row(i);
        for k in 0..=i {
            out[k] += row[k] * xi;
        }
    }
    out
}
