//! Elementary double-precision numerics shared by the rest of the crate.
//!
//! Everything here is a pure function of its inputs. Summations run in index
//! order so results are reproducible bit-for-bit across runs.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data, rejecting empty shapes and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("{rows}x{cols} matrix")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {})",
                k / cols,
                k % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · other^T`, i.e. all pairwise row dot products.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} · ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("cosine_sim"));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero-norm vector in cosine_sim".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Rows scaled to unit length, plus the original norms.
pub fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate(format!("row {i} has norm {n}")));
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let (an, _) = normalize_rows(a)?;
    let (bn, _) = normalize_rows(b)?;
    Ok(an.matmul_t(&bn)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// `log Σ exp(x_k)` via max-shift.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("log_sum_exp"));
    }
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("log_sum_exp input".into()));
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

/// Numerically stable softmax. Entries equal to `-inf` get probability zero.
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(xs)?;
    if !lse.is_finite() {
        return Err(Error::Degenerate("softmax of all -inf logits".into()));
    }
    let mut p: Vec<f64> = xs.iter().map(|&x| (x - lse).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    Ok(p)
}

/// Largest relative error between `analytic` and central differences of `f`
/// at `point`. The relative error of coordinate `k` is
/// `|numeric_k - analytic_k| / max(1, |analytic_k|)`.
pub fn grad_check<F>(mut f: F, analytic: &[f64], point: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, point has {}",
            analytic.len(),
            point.len()
        )));
    }
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + step;
        let fp = f(&x);
        x[k] = orig - step;
        let fm = f(&x);
        x[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at probe {k}")));
        }
        let numeric = (fp - fm) / (2.0 * step);
        let err = (numeric - analytic[k]).abs() / analytic[k].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Seeded pseudo-random stream.
///
/// Backed by ChaCha8 keyed with the 64-bit seed (expanded through the
/// generator's own `seed_from_u64`), so a given seed yields the same stream
/// on every platform. Independent streams for the same seed are obtained
/// with [`Rng::fork`], which selects a distinct ChaCha stream id.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A fresh stream derived from this generator's seed and `stream`.
    /// Does not advance `self`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Draw an index from an unnormalized nonnegative weight vector.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (k, &w) in weights.iter().enumerate() {
            if u < w {
                return k;
            }
            u -= w;
        }
        // Rounding can leave u marginally above the last cumulative weight.
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}
