//! Dense row-major matrices and the seeded Gaussian generator.
//!
//! Everything in the crate is built on [`Matrix`]. Operations are plain
//! triple loops; at the sizes this simulator runs, that is fast enough and
//! keeps results bit-reproducible across platforms.
//!
//! # Random numbers
//!
//! [`gaussian_init`] draws from a `ChaCha8Rng` seeded with
//! `SeedableRng::seed_from_u64(seed)`. Uniforms are built from the top 53
//! bits of `next_u64`, and normal deviates use the basic (trigonometric)
//! Box–Muller transform, both outputs of each pair consumed in row-major
//! order. Sampling happens in f64 and is then cast to the target scalar.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("cannot concatenate an empty list of matrices")]
    NothingToConcat,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense `rows x cols` matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Convenience constructor for literals in tests and examples.
    ///
    /// Panics on ragged or empty input.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let data: Vec<T> = rows
            .iter()
            .flat_map(|row| {
                assert_eq!(row.len(), c, "ragged rows");
                row.iter().copied()
            })
            .collect();
        Self::from_vec(r, c, data).expect("invalid literal matrix")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a.is_zero() {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(TensorError::Shape {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a.is_zero() {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(TensorError::Shape {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = T::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        axpy(T::one(), other, self)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        axpy(-T::one(), other, self)
    }

    /// In-place `self += alpha · other`.
    pub fn add_scaled_assign(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_scaled_assign")?;
        for (y, &x) in self.data.iter_mut().zip(&other.data) {
            *y += alpha * x;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Column-wise concatenation `[M₁, M₂, …]`; all inputs share a row count.
    pub fn hcat(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::NothingToConcat)?;
        let rows = first.rows;
        let mut cols = 0;
        for p in parts {
            if p.rows != rows {
                return Err(TensorError::Shape {
                    op: "hcat",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
            cols += p.cols;
        }
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for p in parts {
                out.data[i * cols + offset..i * cols + offset + p.cols].copy_from_slice(p.row(i));
                offset += p.cols;
            }
        }
        Ok(out)
    }

    /// Row-wise concatenation (stacking); all inputs share a column count.
    pub fn vcat(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::NothingToConcat)?;
        let cols = first.cols;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(TensorError::Shape {
                    op: "vcat",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }

    /// Casts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                .collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            if i > 0 {
                write!(f, "; ")?;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v:?}")?;
            }
        }
        write!(f, "]")
    }
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.matmul(b)
}

/// Entrywise `alpha · x + y`.
pub fn axpy<T: Scalar>(alpha: T, x: &Matrix<T>, y: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = y.clone();
    out.add_scaled_assign(alpha, x)?;
    Ok(out)
}

/// Stream of standard normal deviates (ChaCha8 + basic Box–Muller).
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform on `(0, 1]`.
    pub fn next_uniform_open0(&mut self) -> f64 {
        1.0 - self.next_uniform()
    }

    /// Uniform on `[0, 1)` from the top 53 bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_uniform_open0();
        let u2 = self.next_uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(radius * theta.sin());
        radius * theta.cos()
    }
}

/// `rows x cols` matrix with i.i.d. `N(0, sigma²)` entries; bit-identical for
/// identical arguments.
pub fn gaussian_init<T: Scalar>(rows: usize, cols: usize, sigma: f64, seed: u64) -> Matrix<T> {
    assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be a finite non-negative value");
    if sigma == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let mut stream = GaussianStream::new(seed);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = T::from_f64(sigma * stream.next_standard_normal()).unwrap_or_else(T::zero);
    }
    m
}

/// SplitMix64 finalizer; used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of salts into one derived seed.
pub fn derive_seed(seed: u64, salts: &[u64]) -> u64 {
    salts.iter().fold(seed, |acc, &s| mix_seed(acc, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows)
    }

    #[test]
    fn matmul_identity() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn matmul_annihilating() {
        let a = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = m(&[&[0.0, 0.0], &[0.0, 1.0]]);
        assert!(matmul(&a, &b).unwrap().is_zero());
    }

    #[test]
    fn matmul_outer_product() {
        let a = m(&[&[1.0], &[2.0]]);
        let b = m(&[&[3.0, 4.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[3.0, 4.0], &[6.0, 8.0]]));
    }

    #[test]
    fn matmul_shape_error_carries_both_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        assert_eq!(
            matmul(&a, &b).unwrap_err(),
            TensorError::Shape {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = gaussian_init::<f64>(4, 3, 1.0, 1);
        let b = gaussian_init::<f64>(4, 5, 1.0, 2);
        let c = gaussian_init::<f64>(6, 3, 1.0, 3);
        let tn = a.t_matmul(&b).unwrap();
        assert!(tn.max_abs_diff(&a.transpose().matmul(&b).unwrap()).unwrap() < 1e-14);
        let nt = a.matmul_t(&c).unwrap();
        assert!(nt.max_abs_diff(&a.matmul(&c.transpose()).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn gaussian_zero_sigma_is_zero() {
        assert!(gaussian_init::<f64>(2, 2, 0.0, 99).is_zero());
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = gaussian_init::<f64>(7, 5, 0.3, 42);
        let b = gaussian_init::<f64>(7, 5, 0.3, 42);
        let bits = |x: &Matrix<f64>| x.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, gaussian_init::<f64>(7, 5, 0.3, 43));
    }

    #[test]
    fn gaussian_sample_std() {
        let g = gaussian_init::<f64>(1000, 1000, 0.01, 7);
        let n = 1_000_000.0;
        let mean = g.sum() / n;
        let var = g.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((std - 0.01).abs() <= 0.01 * 0.05, "std = {std}");
        assert!(mean.abs() < 1e-4);
    }

    #[test]
    fn axpy_cases() {
        let x = m(&[&[1.0, -2.0]]);
        let y = m(&[&[0.5, 4.0]]);
        assert_eq!(axpy(0.0, &x, &y).unwrap(), y);
        assert!(axpy(1.0, &x, &x.scale(-1.0)).unwrap().is_zero());
        assert_eq!(axpy(2.0, &m(&[&[1.0]]), &m(&[&[3.0]])).unwrap(), m(&[&[5.0]]));
        assert!(axpy(1.0, &x, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn concat_shapes() {
        let a = Matrix::<f64>::zeros(3, 1);
        let b = Matrix::<f64>::zeros(3, 2);
        assert_eq!(Matrix::hcat(&[&a, &b]).unwrap().shape(), (3, 3));
        assert_eq!(Matrix::vcat(&[&a.transpose(), &b.transpose()]).unwrap().shape(), (3, 3));
        assert!(Matrix::hcat(&[&a, &b.transpose()]).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { row: 0, col: 1 })
        ));
        assert!(matches!(
            Matrix::<f64>::from_vec(1, 2, vec![1.0]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn works_in_single_precision() {
        let a = Matrix::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = a.matmul(&Matrix::identity(2)).unwrap();
        assert_eq!(p, a);
        let g = gaussian_init::<f32>(3, 3, 1.0, 5);
        assert_eq!(g.cast::<f64>().cast::<f32>(), g);
    }
}
