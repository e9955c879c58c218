use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Scalar type the model is generic over: `f32` in production, `f64` for
/// finite-difference checks.
pub trait Real:
    Float + FromPrimitive + Sum + AddAssign + SubAssign + MulAssign + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + Sum
        + AddAssign
        + SubAssign
        + MulAssign
        + Debug
        + Send
        + Sync
        + 'static
{
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    /// `self * b`
    pub fn matmul(&self, b: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, b.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &bv) in o.iter_mut().zip(b.row(k)) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    /// `self * b^T`
    pub fn matmul_t(&self, b: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, b.cols, "matmul_t inner dimension");
        let mut out = Matrix::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..b.rows {
                out.data[i * b.rows + j] = dot(a, b.row(j));
            }
        }
        out
    }

    /// `self^T * b`
    pub fn t_matmul(&self, b: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.rows, b.rows, "t_matmul inner dimension");
        let mut out = Matrix::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let brow = b.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for (o, &bv) in o.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn add_row_vector(&mut self, v: &[T]) {
        assert_eq!(v.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, &b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn column_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: cast_slice(&self.data),
        }
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn cast_slice<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter()
        .map(|x| U::from(*x).expect("finite cast"))
        .collect()
}
