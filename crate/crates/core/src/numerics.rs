//! Dense matrices, Householder QR, diagonal Gaussian kernels and seeded
//! random streams.
//!
//! All transcendental functions go through `libm`, so results are identical
//! with and without `std` and across platforms.

use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ln(2π) / 2`.
pub const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// Pivots smaller than this fraction of the largest input column norm are
/// treated as rank deficiency in [`reduced_qr`].
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix data",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Matrix with i.i.d. standard normal entries drawn row-major from `rng`.
    pub fn standard_normal(rows: usize, cols: usize, rng: &mut RngStream) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.standard_normal())
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                what: "matmul inner dimension",
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                what: "matrix subtraction",
                expected: self.rows * self.cols,
                found: other.rows * other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }
}

/// Reduced QR decomposition `a = q·r` of a `d×K` matrix with `d ≥ K`, by
/// Householder reflections.
///
/// `q` is `d×K` with orthonormal columns and `r` is `K×K` upper triangular
/// with a strictly positive diagonal, which makes the factorization unique.
pub fn reduced_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (d, k) = (a.rows(), a.cols());
    if d < k {
        return Err(Error::DimensionMismatch {
            what: "reduced QR needs rows >= cols",
            expected: k,
            found: d,
        });
    }
    let scale = (0..k)
        .map(|j| norm2(&a.column(j)))
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);

    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for col in 0..k {
        let x: Vec<f64> = (col..d).map(|i| r.get(i, col)).collect();
        let x_norm = norm2(&x);
        if x_norm <= RANK_TOLERANCE * scale {
            return Err(Error::RankDeficient {
                column: col,
                pivot: x_norm,
            });
        }
        let alpha = if x[0] >= 0.0 { -x_norm } else { x_norm };
        let mut v = x;
        v[0] -= alpha;
        let v_norm = norm2(&v);
        for e in v.iter_mut() {
            *e /= v_norm;
        }
        // R[col.., col..] <- (I - 2vvᵀ) R[col.., col..]
        for j in col..k {
            let proj: f64 = v.iter().enumerate().map(|(t, vt)| vt * r.get(col + t, j)).sum();
            for (t, vt) in v.iter().enumerate() {
                let cur = r.get(col + t, j);
                r.set(col + t, j, cur - 2.0 * vt * proj);
            }
        }
        r.set(col, col, alpha);
        for i in col + 1..d {
            r.set(i, col, 0.0);
        }
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{K-1} applied to the first K columns of I_d.
    let mut q = Matrix::from_fn(d, k, |i, j| if i == j { 1.0 } else { 0.0 });
    for (col, v) in reflectors.iter().enumerate().rev() {
        for j in 0..k {
            let proj: f64 = v.iter().enumerate().map(|(t, vt)| vt * q.get(col + t, j)).sum();
            if proj == 0.0 {
                continue;
            }
            for (t, vt) in v.iter().enumerate() {
                let cur = q.get(col + t, j);
                q.set(col + t, j, cur - 2.0 * vt * proj);
            }
        }
    }

    let mut r_square = Matrix::from_fn(k, k, |i, j| r.get(i, j));
    for i in 0..k {
        if r_square.get(i, i) < 0.0 {
            for j in i..k {
                let v = r_square.get(i, j);
                r_square.set(i, j, -v);
            }
            for row in 0..d {
                let v = q.get(row, i);
                q.set(row, i, -v);
            }
        }
    }
    Ok((q, r_square))
}

/// Log density of a diagonal Gaussian parameterised by per-dimension
/// standard deviations.
pub fn diag_gaussian_logpdf(x: &[f64], mean: &[f64], std: &[f64]) -> Result<f64> {
    check_len("logpdf mean", x.len(), mean.len())?;
    check_len("logpdf std", x.len(), std.len())?;
    if let Some((index, &value)) = std.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
        return Err(Error::NonPositiveStd { index, value });
    }
    Ok(diag_logpdf_unchecked(x, mean, std))
}

/// [`diag_gaussian_logpdf`] without validation, for inner loops whose
/// inputs were validated upstream.
#[inline]
pub(crate) fn diag_logpdf_unchecked(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((xk, mk), sk) in x.iter().zip(mean).zip(std) {
        let z = (xk - mk) / sk;
        acc += -HALF_LN_TWO_PI - libm::log(*sk) - 0.5 * z * z;
    }
    acc
}

/// Draws `mean + std ⊙ z` with `z` i.i.d. standard normal.
///
/// A zero standard deviation returns the mean coordinate exactly.
pub fn sample_diag_gaussian(mean: &[f64], std: &[f64], rng: &mut RngStream) -> Vec<f64> {
    debug_assert_eq!(mean.len(), std.len());
    mean.iter()
        .zip(std)
        .map(|(m, s)| {
            let z = rng.standard_normal();
            if *s == 0.0 {
                *m
            } else {
                m + s * z
            }
        })
        .collect()
}

/// What a random stream is used for. Part of the stream key, so that
/// streams for different purposes never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Purpose {
    Dataset = 1,
    Partition = 2,
    Etf = 3,
    ModelInit = 4,
    Shuffle = 5,
    GmmFit = 6,
    PseudoFeatures = 7,
    Retrain = 8,
    Test = 255,
}

/// Identifies one independent random stream under a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub purpose: Purpose,
    pub client: u32,
    pub round: u32,
    pub index: u32,
}

impl StreamKey {
    pub fn new(purpose: Purpose) -> Self {
        Self {
            purpose,
            client: 0,
            round: 0,
            index: 0,
        }
    }

    pub fn client(mut self, client: usize) -> Self {
        self.client = client as u32;
        self
    }

    pub fn round(mut self, round: usize) -> Self {
        self.round = round as u32;
        self
    }

    pub fn index(mut self, index: usize) -> Self {
        self.index = index as u32;
        self
    }

    /// Packs the key into a ChaCha stream id: 8 bits purpose, 20 bits
    /// client, 20 bits round, 16 bits index.
    pub fn stream_id(&self) -> u64 {
        debug_assert!(self.client < 1 << 20 && self.round < 1 << 20 && self.index < 1 << 16);
        ((self.purpose as u64) << 56)
            | ((self.client as u64 & 0xF_FFFF) << 36)
            | ((self.round as u64 & 0xF_FFFF) << 16)
            | (self.index as u64 & 0xFFFF)
    }
}

/// A reproducible random stream identified by `(seed, stream id)`.
///
/// Streams with different ids are independent ChaCha8 streams, so the draws
/// of one stream never depend on how much another stream was consumed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn keyed(seed: u64, key: StreamKey) -> Self {
        Self::new(seed, key.stream_id())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// `ln Σ exp(v_i)` with max subtraction. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
