//! Minimal dense linear algebra: row-major matrices, deterministic matmul,
//! row softmax, and a thin SVD. Everything is generic over the scalar type;
//! `f64` carries the conversion path and `f32` the forward path.

mod svd;

pub use svd::thin_svd;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point scalar usable as a matrix element.
///
/// Blanket-implemented; covers `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + Sum
        + Default
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix<{}x{}>", self.rows, self.cols)
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Matrix product with a fixed i-k-j loop nest; per-entry accumulation is
    /// always in ascending k order, so results are run-to-run deterministic.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} . {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for j in 0..other.cols {
                    o_row[j] += a_ik * b_row[j];
                }
            }
        }
        Ok(out)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Matrix<T> {
        let mut out = self.clone();
        for i in 0..out.rows {
            softmax_in_place(out.row_mut(i));
        }
        out
    }

    /// Columns `sel` (ascending in output) gathered into a new matrix.
    pub fn select_cols(&self, sel: &[usize]) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, sel.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = out.row_mut(i);
            for (jj, &j) in sel.iter().enumerate() {
                dst[jj] = src[j];
            }
        }
        out
    }

    /// Column-wise concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "hcat row mismatch {} vs {}",
                self.rows, other.rows
            )));
        }
        let mut out = Matrix::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
            out.row_mut(i)[self.cols..].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    /// Contiguous column block `[lo, hi)`.
    pub fn col_block(&self, lo: usize, hi: usize) -> Matrix<T> {
        let sel: Vec<usize> = (lo..hi).collect();
        self.select_cols(&sel)
    }

    /// Contiguous row block `[lo, hi)`.
    pub fn row_block(&self, lo: usize, hi: usize) -> Matrix<T> {
        let mut out = Matrix::zeros(hi - lo, self.cols);
        for (dst, src) in (lo..hi).enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn frob_sq(&self) -> T {
        self.data.iter().map(|&x| x * x).fold(T::zero(), |a, b| a + b)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a.max(b.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |a, (&x, &y)| a.max((x - y).abs()))
    }

    pub fn scale(&self, c: T) -> Matrix<T> {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = *v * c;
        }
        out
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Shape("sub shape mismatch".into()));
        }
        let mut out = self.clone();
        for (v, &o) in out.data.iter_mut().zip(&other.data) {
            *v = *v - o;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy cast between scalar types (used only at checkpoint write).
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&v| U::from(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// In-place softmax over one row, guarded against overflow by subtracting the
/// row maximum before exponentiating.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Dot product in ascending index order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Result of a rank-`t` thin SVD: `a ~= u . diag(sigma) . vt`.
#[derive(Debug, Clone)]
pub struct SvdResult<T> {
    /// Left singular vectors, `m x t`, orthonormal columns.
    pub u: Matrix<T>,
    /// Singular values, non-increasing, length `t`.
    pub sigma: Vec<T>,
    /// Right singular vectors transposed, `t x n`, orthonormal rows.
    pub vt: Matrix<T>,
    /// Sum of squared singular values beyond rank `t`; equals the squared
    /// Frobenius reconstruction error.
    pub discarded_sq_sum: T,
}

impl<T: Scalar> SvdResult<T> {
    /// `u . diag(sigma) . vt`, the rank-`t` reconstruction.
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut scaled = self.u.clone();
        for i in 0..scaled.rows() {
            let row = scaled.row_mut(i);
            for (j, &s) in self.sigma.iter().enumerate() {
                row[j] = row[j] * s;
            }
        }
        scaled.matmul(&self.vt).expect("shapes fixed by construction")
    }
}
