//! Dense real linear algebra: row-major matrices, symmetric matrices, a
//! cyclic Jacobi eigensolver and spectral function application.
//!
//! Everything here is generic over [`Real`], which is implemented for `f32`
//! (single precision, as used in training) and `f64` (the default profile used for
//! gradient checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, Deref, Index, IndexMut, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point precision profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Relative off-diagonal Frobenius norm at which Jacobi sweeps stop.
    pub fn jacobi_tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-6,
            Precision::F64 => 1e-14,
        }
    }

    /// Relative asymmetry accepted by [`SymmetricMatrix::new`].
    pub fn symmetry_tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-5,
            Precision::F64 => 1e-12,
        }
    }

    /// Distance from `x` to the next larger representable number in this
    /// precision (MATLAB's `eps(x)` for positive `x`).
    pub fn ulp(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Precision::F32 => {
                let xf = x as f32;
                (xf.next_up() - xf) as f64
            }
            Precision::F64 => x.next_up() - x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "single" => Ok(Precision::F32),
            "f64" | "double" => Ok(Precision::F64),
            other => Err(Error::InvalidParameter(format!("unknown precision '{other}'"))),
        }
    }
}

/// Scalar type of a precision profile.
pub trait Real:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    /// Converts an `f64` constant into this precision.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    fn lit(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    fn lit(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
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

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(Error::NonFinite {
                row: k / self.cols.max(1),
                col: k % self.cols.max(1),
            }),
            None => Ok(()),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Matrix product. Panics on inner-dimension mismatch.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul: {}x{} times {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.rows, rhs.rows, "t_matmul: row mismatch");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let lhs_row = self.row(k);
            let rhs_row = rhs.row(k);
            for (i, &a) in lhs_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.cols, "matmul_t: column mismatch");
        Matrix::from_fn(self.rows, rhs.rows, |i, j| {
            self.row(i)
                .iter()
                .zip(rhs.row(j))
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
        })
    }

    pub fn zip_map(&self, rhs: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
        assert_eq!(self.shape(), rhs.shape(), "elementwise shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn add(&self, rhs: &Matrix<T>) -> Matrix<T> {
        self.zip_map(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix<T>) -> Matrix<T> {
        self.zip_map(rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Matrix<T>) -> Matrix<T> {
        self.zip_map(rhs, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        self.map(|a| a * s)
    }

    /// Frobenius inner product `Σ aᵢⱼ bᵢⱼ`.
    pub fn inner(&self, rhs: &Matrix<T>) -> T {
        assert_eq!(self.shape(), rhs.shape(), "inner product shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &a| acc + a * a).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &a| acc.max(a.abs()))
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| U::lit(a.as_f64())).collect(),
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

/// Square symmetric matrix.
#[derive(Clone, PartialEq)]
pub struct SymmetricMatrix<T>(Matrix<T>);

impl<T: Real> Debug for SymmetricMatrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Symmetric{:?}", self.0)
    }
}

impl<T: Real> SymmetricMatrix<T> {
    /// Validates squareness, finiteness and symmetry within
    /// `tol · max(1, ‖A‖_F)` for the profile's tolerance.
    pub fn new(m: Matrix<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Shape(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        m.check_finite()?;
        let scale = m.frobenius_norm().as_f64().max(1.0);
        let tolerance = T::PRECISION.symmetry_tolerance() * scale;
        let mut asymmetry = 0.0f64;
        for i in 0..m.rows {
            for j in (i + 1)..m.cols {
                asymmetry = asymmetry.max((m[(i, j)] - m[(j, i)]).abs().as_f64());
            }
        }
        if asymmetry > tolerance {
            return Err(Error::NotSymmetric {
                asymmetry,
                tolerance,
            });
        }
        Ok(Self(m))
    }

    /// Returns `½(M + Mᵀ)`. Panics if `m` is not square.
    pub fn symmetrize(m: &Matrix<T>) -> Self {
        assert!(m.is_square(), "symmetrize: matrix must be square");
        let half = T::lit(0.5);
        let mut out = Matrix::zeros(m.rows, m.cols);
        for i in 0..m.rows {
            out[(i, i)] = m[(i, i)];
            for j in (i + 1)..m.cols {
                let v = half * (m[(i, j)] + m[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Self(out)
    }

    /// Wraps a matrix the caller guarantees to be exactly symmetric.
    pub(crate) fn from_exact(m: Matrix<T>) -> Self {
        debug_assert!(m.is_square());
        Self(m)
    }

    pub fn zeros(d: usize) -> Self {
        Self(Matrix::zeros(d, d))
    }

    pub fn identity(d: usize) -> Self {
        Self(Matrix::identity(d))
    }

    pub fn from_diag(diag: &[T]) -> Self {
        Self(Matrix::from_diag(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.0
    }

    pub fn cast<U: Real>(&self) -> SymmetricMatrix<U> {
        SymmetricMatrix(self.0.cast())
    }
}

impl<T> Deref for SymmetricMatrix<T> {
    type Target = Matrix<T>;

    fn deref(&self) -> &Matrix<T> {
        &self.0
    }
}

/// Orthogonal eigenvectors (columns of `u`) with eigenvalues in
/// non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem<T: Real> {
    pub u: Matrix<T>,
    pub lambda: Vec<T>,
}

impl<T: Real> EigenSystem<T> {
    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// `U · diag(λ) · Uᵀ`.
    pub fn reconstruct(&self) -> SymmetricMatrix<T> {
        spectral_product(&self.u, &self.lambda)
    }

    pub fn with_lambda(&self, lambda: Vec<T>) -> Self {
        assert_eq!(lambda.len(), self.lambda.len());
        Self {
            u: self.u.clone(),
            lambda,
        }
    }

    pub fn cast<U: Real>(&self) -> EigenSystem<U> {
        EigenSystem {
            u: self.u.cast(),
            lambda: self.lambda.iter().map(|&l| U::lit(l.as_f64())).collect(),
        }
    }
}

const MAX_SWEEPS: usize = 30;

fn off_diagonal_norm<T: Real>(a: &Matrix<T>) -> T {
    let n = a.rows;
    let mut s = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Sweeps stop once the off-diagonal Frobenius norm drops below the
/// profile's relative tolerance; 30 sweeps is the hard cap. Eigenvalues come
/// back non-increasing, and each eigenvector is signed so that its
/// largest-magnitude component (lowest index on ties) is positive.
pub fn sym_eig<T: Real>(a: &SymmetricMatrix<T>) -> Result<EigenSystem<T>> {
    let n = a.dim();
    let mut m = a.as_matrix().clone();
    let mut v = Matrix::<T>::identity(n);
    let norm = m.frobenius_norm();
    let tol = T::lit(T::PRECISION.jacobi_tolerance()) * norm;

    let mut converged = false;
    for _ in 0..=MAX_SWEEPS {
        if off_diagonal_norm(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut m, &mut v, p, q);
            }
        }
    }
    if !converged {
        let off = off_diagonal_norm(&m);
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual: (off / norm).as_f64(),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[(j, j)]
            .partial_cmp(&m[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let lambda: Vec<T> = order.iter().map(|&k| m[(k, k)]).collect();
    let mut u = Matrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let mut best = 0;
        for i in 1..n {
            if v[(i, k)].abs() > v[(best, k)].abs() {
                best = i;
            }
        }
        let sign = if v[(best, k)] < T::zero() { -T::one() } else { T::one() };
        for i in 0..n {
            u[(i, col)] = sign * v[(i, k)];
        }
    }
    Ok(EigenSystem { u, lambda })
}

/// One Jacobi rotation annihilating `m[(p, q)]`, accumulated into `v`.
fn rotate<T: Real>(m: &mut Matrix<T>, v: &mut Matrix<T>, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq == T::zero() {
        return;
    }
    let n = m.rows;
    let two = T::lit(2.0);
    let theta = (m[(q, q)] - m[(p, p)]) / (two * apq);
    let t = theta.signum() / (theta.abs() + theta.hypot(T::one()));
    let t = if theta == T::zero() { T::one() } else { t };
    let c = T::one() / t.hypot(T::one());
    let s = t * c;

    let app = m[(p, p)];
    let aqq = m[(q, q)];
    m[(p, p)] = app - t * apq;
    m[(q, q)] = aqq + t * apq;
    m[(p, q)] = T::zero();
    m[(q, p)] = T::zero();
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[(k, p)];
        let akq = m[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        m[(k, p)] = new_kp;
        m[(p, k)] = new_kp;
        m[(k, q)] = new_kq;
        m[(q, k)] = new_kq;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// `U · diag(values) · Uᵀ`, computed on the upper triangle and mirrored so
/// the result is exactly symmetric.
pub fn spectral_product<T: Real>(u: &Matrix<T>, values: &[T]) -> SymmetricMatrix<T> {
    let n = u.rows;
    assert_eq!(u.cols, values.len());
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = T::zero();
            for (k, &f) in values.iter().enumerate() {
                s += u[(i, k)] * f * u[(j, k)];
            }
            out[(i, j)] = s;
            out[(j, i)] = s;
        }
    }
    SymmetricMatrix(out)
}

/// Applies a scalar function to the spectrum: `U · diag(f(λ)) · Uᵀ`.
pub fn apply_spectral<T: Real>(
    e: &EigenSystem<T>,
    f: impl Fn(T) -> T,
) -> Result<SymmetricMatrix<T>> {
    let mut values = Vec::with_capacity(e.dim());
    for (index, &l) in e.lambda.iter().enumerate() {
        let v = f(l);
        if !v.is_finite() {
            return Err(Error::SpectralNonFinite {
                index,
                eigenvalue: l.as_f64(),
            });
        }
        values.push(v);
    }
    Ok(spectral_product(&e.u, &values))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms<T> {
    pub frobenius: T,
    /// Largest singular value, i.e. `max |λᵢ|` for a symmetric matrix.
    pub spectral: T,
}

pub fn norms<T: Real>(a: &SymmetricMatrix<T>) -> Result<Norms<T>> {
    let eig = sym_eig(a)?;
    let spectral = eig
        .lambda
        .iter()
        .fold(T::zero(), |acc, &l| acc.max(l.abs()));
    Ok(Norms {
        frobenius: a.frobenius_norm(),
        spectral,
    })
}
