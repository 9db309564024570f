//! Dense kernels and replayable randomness.
//!
//! Every reduction here runs in a fixed sequential order so results are
//! bit-reproducible across runs and thread counts.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg, Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
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

    /// Builds a matrix from row-major data, rejecting size mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return arg(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return arg(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return arg("ragged rows");
        }
        Self::from_vec(rows.len(), cols, rows.concat())
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "\n  {:?}", self.row(i))?;
        }
        write!(f, "\n]")
    }
}

/// Sequential dot product.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Numerically stable `log Σ exp(v_k)`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return arg("log_sum_exp of an empty vector");
    }
    if values.iter().any(|v| !v.is_finite()) {
        return arg("log_sum_exp input must be finite");
    }
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = values.iter().fold(0.0, |acc, v| acc + (v - m).exp());
    Ok(m + s.ln())
}

/// Scales every row to unit L2 norm.
///
/// Rows whose norm is already 1 to within a few ulp are copied unchanged, which
/// makes the operation idempotent bit-for-bit.
pub fn row_l2_normalize(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let norm = dot(m.row(i), m.row(i)).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroRow { row: i });
        }
        if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
            continue;
        }
        for v in out.row_mut(i) {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Matrix product `a · b` with `i-k-j` loop order and sequential accumulation
/// over `k`.
pub fn gemm(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return arg(format!(
            "gemm shape mismatch: {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ));
    }
    let (n, p) = (a.rows(), b.cols());
    let mut c = Matrix::zeros(n, p);
    for i in 0..n {
        let out = &mut c.data[i * p..(i + 1) * p];
        for (k, &aik) in a.row(i).iter().enumerate() {
            for (o, &bkj) in out.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(c)
}

/// `aᵀ · b` without materializing the transpose.
pub fn gemm_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return arg(format!(
            "gemm_tn shape mismatch: ({}x{})^T by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ));
    }
    let (n, p) = (a.cols(), b.cols());
    let mut c = Matrix::zeros(n, p);
    for k in 0..a.rows() {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            let out = &mut c.data[i * p..(i + 1) * p];
            for (o, &bkj) in out.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(c)
}

/// `a · bᵀ` without materializing the transpose.
pub fn gemm_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return arg(format!(
            "gemm_nt shape mismatch: {}x{} by ({}x{})^T",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        ));
    }
    let mut c = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            c[(i, j)] = dot(a.row(i), b.row(j));
        }
    }
    Ok(c)
}

/// Replayable random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha8 in counter mode: the seed fixes the key, the stream id
/// selects the nonce, so distinct ids never overlap.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire-style rejection keeps the draw unbiased.
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.inner.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices drawn uniformly from `0..n`, in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Stream ids for each independent source of randomness in a run.
pub mod streams {
    pub const SYNTH: u64 = 1;
    pub const PU_SELECT: u64 = 2;
    pub const PNU_SELECT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const PROBE_SHUFFLE: u64 = 7;
    pub const PVU_SPLIT: u64 = 8;
    pub const FINETUNE_SHUFFLE: u64 = 9;
}
