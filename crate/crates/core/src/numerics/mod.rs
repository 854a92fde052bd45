//! Dense tensor substrate.
//!
//! Storage is either `f32` or `f64` (see [`Real`]); every reduction is
//! carried out in `f64` regardless of the storage precision. Values are
//! immutable once built and all operations here are pure, so they can be
//! shared freely across threads. The reverse-mode [`Tape`] is the one
//! stateful piece and is single-owner.

mod exact;
mod gradcheck;
mod linalg;
mod tape;

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use exact::{norm_sq_split, two_prod, two_sum, Compensated, Split};
pub use gradcheck::{central_difference, relative_error};
pub use linalg::{cumsum_seq, matmul};
pub use tape::{CustomOp, Gradients, Tape, Var};

/// Storage scalar. Arithmetic goes through `f64`.
pub trait Real:
    Copy + Default + PartialEq + PartialOrd + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const NAME: &'static str;
    /// Attention denominator guard for this precision.
    const GUARD: f64;
    const BYTES: usize;

    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    const GUARD: f64 = 1e-6;
    const BYTES: usize = 4;

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    const GUARD: f64 = 1e-12;
    const BYTES: usize = 8;

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

pub(crate) fn check_finite<T: Real>(data: &[T], what: &str) -> Result<()> {
    match data.iter().position(|x| !x.to_f64().is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("{what}: entry {i} is {}", data[i]))),
    }
}

/// Row-major 2-D array. The tape works exclusively in this form; a
/// `[B, L, D]` activation is a `(B*L) x D` matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data, "matrix")?;
        Ok(Matrix { rows, cols, data })
    }

    /// Builds without the finiteness scan. Callers guarantee the length.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub(crate) fn from_f64_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Matrix::from_raw(rows, cols, data.into_iter().map(T::from_f64).collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_raw(rows, cols, vec![T::default(); rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(T::from_f64(f(r, c)));
            }
        }
        Matrix::from_raw(rows, cols, data)
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.to_f64().is_finite())
    }
}

impl<T: Real> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix<{}>[{}x{}]", T::NAME, self.rows, self.cols)
    }
}

/// Batch-major activations `[batch, len, dim]`, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor3<T> {
    batch: usize,
    len: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn new(batch: usize, len: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if batch == 0 || len == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "tensor dims must be positive, got [{batch}, {len}, {dim}]"
            )));
        }
        if data.len() != batch * len * dim {
            return Err(Error::Shape(format!(
                "tensor [{batch}, {len}, {dim}] needs {} values, got {}",
                batch * len * dim,
                data.len()
            )));
        }
        check_finite(&data, "tensor")?;
        Ok(Tensor3 {
            batch,
            len,
            dim,
            data,
        })
    }

    pub(crate) fn from_raw(batch: usize, len: usize, dim: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), batch * len * dim);
        Tensor3 {
            batch,
            len,
            dim,
            data,
        }
    }

    /// Converts an `f64` buffer, failing if any value is not finite.
    pub(crate) fn from_f64_checked(
        batch: usize,
        len: usize,
        dim: usize,
        data: Vec<f64>,
        what: &str,
    ) -> Result<Self> {
        let out: Vec<T> = data.into_iter().map(T::from_f64).collect();
        check_finite(&out, what)?;
        Ok(Tensor3::from_raw(batch, len, dim, out))
    }

    pub fn zeros(batch: usize, len: usize, dim: usize) -> Self {
        Tensor3::from_raw(batch, len, dim, vec![T::default(); batch * len * dim])
    }

    pub fn from_fn(
        batch: usize,
        len: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(batch * len * dim);
        for b in 0..batch {
            for l in 0..len {
                for d in 0..dim {
                    data.push(T::from_f64(f(b, l, d)));
                }
            }
        }
        Tensor3::from_raw(batch, len, dim, data)
    }

    /// Standard-normal entries.
    pub fn randn<R: Rng + ?Sized>(batch: usize, len: usize, dim: usize, rng: &mut R) -> Self {
        Tensor3::from_fn(batch, len, dim, |_, _, _| rng.sample(StandardNormal))
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.len, self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, b: usize, l: usize, d: usize) -> T {
        self.data[(b * self.len + l) * self.dim + d]
    }

    pub fn set(&mut self, b: usize, l: usize, d: usize, value: T) {
        self.data[(b * self.len + l) * self.dim + d] = value;
    }

    pub fn row(&self, b: usize, l: usize) -> &[T] {
        let start = (b * self.len + l) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3::from_raw(
            self.batch,
            self.len,
            self.dim,
            self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        )
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor3<T> {
        Tensor3::from_raw(
            self.batch,
            self.len,
            self.dim,
            self.data.iter().map(|x| T::from_f64(f(x.to_f64()))).collect(),
        )
    }

    /// Largest absolute elementwise difference, computed in `f64`.
    pub fn max_abs_diff<U: Real>(&self, other: &Tensor3<U>) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Views the tensor as a `(batch*len) x dim` matrix.
    pub fn into_matrix(self) -> Matrix<T> {
        Matrix::from_raw(self.batch * self.len, self.dim, self.data)
    }

    pub fn from_matrix(batch: usize, len: usize, m: Matrix<T>) -> Result<Self> {
        if m.rows != batch * len {
            return Err(Error::Shape(format!(
                "matrix with {} rows cannot be viewed as [{batch}, {len}, _]",
                m.rows
            )));
        }
        Ok(Tensor3::from_raw(batch, len, m.cols, m.data))
    }
}

impl<T: Real> fmt::Debug for Tensor3<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor3<{}>[{}, {}, {}]",
            T::NAME,
            self.batch,
            self.len,
            self.dim
        )
    }
}
