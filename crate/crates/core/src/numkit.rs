//! Dense numerical core and counter-based random substreams.
//!
//! Everything in the simulator is expressed through [`ParamVector`] (flat model
//! parameters) and [`DenseMatrix`] (row-major data and layer weights). Random
//! draws come from [`RngStream`]s that are pure functions of
//! `(master_seed, stream_id, counter)`, so any client or round can be replayed
//! in isolation and in any thread order.

use std::ops::{Index, IndexMut};

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Flat model parameter vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        dot(self, other)
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        FedError::check_dim(self.len(), other.len())?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    /// `self + other`.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        FedError::check_dim(self.len(), other.len())?;
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| a * v).collect())
    }

    /// In-place `self += a * x`.
    pub fn axpy_assign(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        FedError::check_dim(self.len(), x.len())?;
        for (y, xv) in self.0.iter_mut().zip(&x.0) {
            *y += a * xv;
        }
        Ok(())
    }

    /// Element-wise mean of a non-empty set of equal-length vectors, summed in
    /// the given order.
    pub fn mean_of<'a, I>(vectors: I) -> Result<ParamVector>
    where
        I: IntoIterator<Item = &'a ParamVector>,
    {
        let mut iter = vectors.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| FedError::Numeric("mean of an empty vector set".into()))?;
        let mut acc = first.clone();
        let mut n = 1usize;
        for v in iter {
            FedError::check_dim(acc.len(), v.len())?;
            for (a, b) in acc.0.iter_mut().zip(&v.0) {
                *a += b;
            }
            n += 1;
        }
        let inv = 1.0 / n as f64;
        for a in &mut acc.0 {
            *a *= inv;
        }
        Ok(acc)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// `a·x + y`.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    FedError::check_dim(x.len(), y.len())?;
    Ok(ParamVector(
        x.0.iter().zip(&y.0).map(|(xv, yv)| a * xv + yv).collect(),
    ))
}

pub fn dot(x: &ParamVector, y: &ParamVector) -> Result<f64> {
    FedError::check_dim(x.len(), y.len())?;
    Ok(x.0.iter().zip(&y.0).map(|(a, b)| a * b).sum())
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(FedError::Numeric(format!(
                "matrix shape {rows}x{cols} must be positive"
            )));
        }
        FedError::check_dim(rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Numeric("matrix entries must be finite".into()));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        FedError::check_dim(self.cols, x.len())?;
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        FedError::check_dim(self.cols, other.rows)?;
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            MatRef::row_major(&self.data, self.cols),
            MatRef::row_major(&other.data, other.cols),
            0.0,
            &mut out.data,
            other.cols,
        );
        Ok(out)
    }

    /// Element-wise sum; shapes must agree.
    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        FedError::check_dim(self.rows, other.rows)?;
        FedError::check_dim(self.cols, other.cols)?;
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| {
                (0..r).all(|c| (self.get(r, c) - self.get(c, r)).abs() <= tol)
            })
    }

    /// Solve `self · x = b` for symmetric positive definite `self`
    /// via Cholesky factorization.
    pub fn cholesky_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.rows;
        FedError::check_dim(n, self.cols)?;
        FedError::check_dim(n, b.len())?;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(FedError::Numeric(
                            "matrix is not positive definite".into(),
                        ));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
            y[i] = (b[i] - s) / l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
            x[i] = (y[i] - s) / l[i * n + i];
        }
        Ok(x)
    }
}

/// Strided read-only view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// View of the transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `C = alpha·A·B + beta·C` where `A` is `m x k`, `B` is `k x n` and `C` is a
/// row-major `m x n` buffer with row stride `ldc`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n, "gemm: C out of bounds");
    if k == 0 {
        for r in 0..m {
            for v in &mut c[r * ldc..r * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.max_offset(m, k) < a.data.len(), "gemm: A out of bounds");
    assert!(b.max_offset(k, n) < b.data.len(), "gemm: B out of bounds");
    // SAFETY: every strided access of A (m x k), B (k x n) and C (m x n) was
    // bounds-checked above, and C is borrowed mutably so it cannot alias A or B.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Murmur3 / SplitMix64 finalizer: a bijective 64-bit mixer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xCBF2_9CE4_8422_2325_u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Counter-based random stream: draw `k` is a keyed hash of `k`, so the stream
/// can be replayed or advanced without touching any other stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    counter: u64,
    key_lo: u64,
    key_hi: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self::at(master_seed, stream_id, 0)
    }

    /// Stream positioned at an arbitrary counter.
    pub fn at(master_seed: u64, stream_id: u64, counter: u64) -> Self {
        let key_lo = mix64(master_seed ^ mix64(stream_id.wrapping_add(GOLDEN_GAMMA)));
        let key_hi = mix64(key_lo ^ stream_id.rotate_left(29) ^ 0xD1B5_4A32_D192_ED03);
        RngStream {
            master_seed,
            stream_id,
            counter,
            key_lo,
            key_hi,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// The value at position `counter`, independent of the current position.
    pub fn value_at(&self, counter: u64) -> u64 {
        let x = counter.wrapping_mul(GOLDEN_GAMMA).wrapping_add(self.key_lo);
        mix64(mix64(x) ^ self.key_hi)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let v = self.value_at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        rand_core::impls::fill_bytes_via_next(self, dst)
    }
}

/// Stream for a named purpose (e.g. `"cohort"`, `"client-train"`) and index.
/// Distinct `(purpose, index)` pairs under one seed map to distinct stream ids.
pub fn derive_stream(master_seed: u64, purpose: &str, index: u64) -> RngStream {
    let stream_id = mix64(fnv1a(purpose)).wrapping_add(index);
    RngStream::new(master_seed, stream_id)
}
