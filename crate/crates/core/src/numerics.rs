//! Scalar, vector and matrix primitives shared by the rest of the crate.
//!
//! Storage is generic over [`Scalar`] (implemented for `f32` and `f64`);
//! every reduction accumulates in `f64` regardless of the storage type.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{ensure_len, Error, Result};

/// Floor applied to the second distribution before taking its log in
/// [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-10;

/// Storage scalar for activations and weights.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Widen into the 64-bit accumulator type.
    fn to_acc(self) -> f64;
    /// Narrow an accumulator back into storage.
    fn from_acc(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn to_acc(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_acc(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn to_acc(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_acc(v: f64) -> Self {
        v
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(format!("row {r} has {} values, expected {cols}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map_inplace(&mut self, mut f: impl FnMut(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }
}

/// A probability distribution over a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist<T> {
    probs: Vec<T>,
}

impl<T: Scalar> ProbDist<T> {
    /// Validates non-negativity and normalization (within 1e-5).
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty distribution"));
        }
        let mut total = 0.0f64;
        for &p in &probs {
            let p = p.to_acc();
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("probabilities sum to {total}")));
        }
        Ok(ProbDist { probs })
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// L2 norm of every column of `w`.
pub fn column_l2_norms<T: Scalar>(w: &Matrix<T>) -> Vec<T> {
    let mut acc = vec![0.0f64; w.cols()];
    for r in 0..w.rows() {
        for (a, &v) in acc.iter_mut().zip(w.row(r)) {
            let v = v.to_acc();
            *a += v * v;
        }
    }
    acc.into_iter().map(|a| T::from_acc(a.sqrt())).collect()
}

/// Nearest-rank threshold that keeps the `round(keep_ratio * n)` largest
/// values under the rule `v >= threshold`.
///
/// A keep count of zero yields `+inf` (keep nothing) and a keep count of `n`
/// yields `-inf` (keep everything). Ties at the threshold are all kept, so
/// duplicated values can push the kept count above the target.
pub fn kth_largest_threshold<T: Scalar>(values: &[T], keep_ratio: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(Error::invalid(format!("keep ratio {keep_ratio} outside [0, 1]")));
    }
    let n = values.len();
    let k = (keep_ratio * n as f64).round() as usize;
    if k == 0 {
        return Ok(T::infinity());
    }
    if k >= n {
        return Ok(T::neg_infinity());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in score population"));
    }
    let mut scratch = values.to_vec();
    let (_, kth, _) = scratch
        .select_nth_unstable_by(k - 1, |a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    Ok(*kth)
}

/// Numerically stable softmax in 64-bit precision.
pub fn softmax_f64<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.to_acc()).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v.to_acc() - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

pub fn softmax<T: Scalar>(logits: &[T]) -> ProbDist<T> {
    ProbDist { probs: softmax_f64(logits).into_iter().map(T::from_acc).collect() }
}

/// `ln softmax(logits)[index]`, computed with log-sum-exp.
pub fn log_softmax_at<T: Scalar>(logits: &[T], index: usize) -> f64 {
    let max = logits.iter().map(|v| v.to_acc()).fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v.to_acc() - max).exp()).sum::<f64>().ln() + max;
    logits[index].to_acc() - lse
}

fn kl_terms(p: impl Iterator<Item = f64>, q: impl Iterator<Item = f64>) -> f64 {
    p.zip(q)
        .filter(|(p, _)| *p > 0.0)
        .map(|(p, q)| p * (p / q.max(KL_FLOOR)).ln())
        .sum()
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)`; zero-probability terms of `p`
/// contribute nothing and `q` is floored at [`KL_FLOOR`].
pub fn kl_divergence<T: Scalar>(p: &ProbDist<T>, q: &ProbDist<T>) -> Result<f64> {
    ensure_len(p.len(), q.len())?;
    Ok(kl_terms(
        p.probs.iter().map(|v| v.to_acc()),
        q.probs.iter().map(|v| v.to_acc()),
    ))
}

/// KL divergence between the softmaxes of two logit vectors, with both
/// distributions kept in 64-bit precision.
pub fn kl_from_logits<T: Scalar>(p_logits: &[T], q_logits: &[T]) -> Result<f64> {
    ensure_len(p_logits.len(), q_logits.len())?;
    let p = softmax_f64(p_logits);
    let q = softmax_f64(q_logits);
    Ok(kl_terms(p.into_iter(), q.into_iter()))
}

/// Mean of squared differences.
pub fn mse<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    ensure_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::invalid("mse of empty vectors"));
    }
    Ok(sum_squared_error(a, b) / a.len() as f64)
}

pub(crate) fn sum_squared_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.to_acc() - y.to_acc();
            d * d
        })
        .sum()
}
