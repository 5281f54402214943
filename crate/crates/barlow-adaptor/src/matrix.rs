//! Dense row-major matrices over `f32` or `f64`.
//!
//! This is deliberately not a tensor library: it provides exactly the
//! primitives the loss stack needs (products, transposed products, column
//! reductions) with explicit shape checks at the API boundary. Training runs
//! in `f32`; every gradient-checking path instantiates the same code in
//! `f64`.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar precision the numeric stack is generic over.
///
/// All random draws happen in `f64` and are converted through [`Scalar::from_f64`],
/// so an `f32` run and an `f64` run with the same seed see the same stream of
/// numbers up to rounding.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense matrix, row-major storage, `rows * cols` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix<T>")]
pub struct Matrix<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Wire form of [`Matrix`]; deserialization re-checks the shape invariant.
#[derive(Deserialize)]
struct RawMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> TryFrom<RawMatrix<T>> for Matrix<T> {
    type Error = String;

    fn try_from(raw: RawMatrix<T>) -> std::result::Result<Self, String> {
        if raw.rows == 0 || raw.cols == 0 || raw.data.len() != raw.rows * raw.cols {
            return Err(format!(
                "matrix shape {}x{} does not match {} entries",
                raw.rows,
                raw.cols,
                raw.data.len()
            ));
        }
        Ok(Matrix {
            rows: raw.rows,
            cols: raw.cols,
            data: raw.data,
        })
    }
}

impl<T: Scalar> Matrix<T> {
    /// Build from a row-major buffer. Panics if the buffer length does not
    /// match `rows * cols` or either dimension is zero; shapes are
    /// programmer-controlled, not user input.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dims must be >= 1");
        assert_eq!(data.len(), rows * cols, "buffer length != rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_vec(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// Build a `len x 1` column matrix.
    pub fn column(values: &[T]) -> Self {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix<T> {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_same_shape("add", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_same_shape("sub", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// In-place `self += other * s`.
    pub fn add_scaled(&mut self, other: &Matrix<T>, s: T) -> Result<()> {
        self.check_same_shape("add_scaled", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
        Ok(())
    }

    /// Sum over rows: returns one value per column.
    pub fn col_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (j, s) in sums.iter_mut().enumerate() {
                *s += self.get(i, j);
            }
        }
        sums
    }

    /// Mean over rows: one value per column.
    pub fn col_means(&self) -> Vec<T> {
        let n = T::from_f64(self.rows as f64);
        self.col_sums().into_iter().map(|s| s / n).collect()
    }

    /// Subtract a per-column offset from every row.
    pub fn sub_row_broadcast(&self, offsets: &[T]) -> Matrix<T> {
        assert_eq!(offsets.len(), self.cols);
        Matrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j) - offsets[j])
    }

    pub fn frobenius_norm_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(())
    }
}

/// Standard matrix product `a * b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j order keeps the inner loop contiguous over both b and out.
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            let b_row = b.row(k);
            let out_row = out.row_mut(i);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Transposed-left product `a^T * b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul_tn",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        for i in 0..a.cols {
            let aki = a.get(k, i);
            let b_row = b.row(k);
            let out_row = out.row_mut(i);
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
    Ok(out)
}

/// Transposed-right product `a * b^T`.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch {
            op: "matmul_nt",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let mut acc = T::zero();
            for (&av, &bv) in a.row(i).iter().zip(b.row(j)) {
                acc += av * bv;
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}
