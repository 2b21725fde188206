//! Dense and gather-compressed matrix-vector products with MAC accounting.
//!
//! Two layouts are provided. The free functions [`dense_matvec`] and
//! [`sparse_matvec`] work on a row-major `out x in` weight and compute one
//! dot product per output row. [`PackedWeight`] stores the same weight
//! channel-major (one contiguous column per input channel) so the sparse
//! product streams only the kept columns; this is what the model and the
//! benchmark use.

use std::hint::black_box;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_len, Error, Result};
use crate::numerics::{Matrix, Scalar};

/// Which input channels of a projection take part in the product.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    bits: Vec<bool>,
    kept: Vec<usize>,
}

impl ChannelMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let kept = bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        ChannelMask { bits, kept }
    }

    pub fn all(n: usize) -> Self {
        ChannelMask { bits: vec![true; n], kept: (0..n).collect() }
    }

    pub fn none(n: usize) -> Self {
        ChannelMask { bits: vec![false; n], kept: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Kept channel indices in ascending order.
    pub fn kept_indices(&self) -> &[usize] {
        &self.kept
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn and(&self, other: &ChannelMask) -> Result<ChannelMask> {
        ensure_len(self.len(), other.len())?;
        Ok(ChannelMask::from_bits(self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect()))
    }

    /// Zeroes the masked-out entries of `x` (the `x ⊙ m` form of the product).
    pub fn apply<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        ensure_len(self.len(), x.len())?;
        Ok(x.iter().zip(&self.bits).map(|(&v, &b)| if b { v } else { T::zero() }).collect())
    }
}

/// Multiply-accumulate tally. `dense_macs` is what the dense product would
/// have cost; `executed_macs` is what actually ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub dense_macs: u64,
    pub executed_macs: u64,
}

impl MacCounter {
    pub fn record_dense(&mut self, rows: usize, cols: usize) {
        let macs = (rows * cols) as u64;
        self.dense_macs += macs;
        self.executed_macs += macs;
    }

    pub fn record_sparse(&mut self, rows: usize, cols: usize, kept: usize) {
        self.dense_macs += (rows * cols) as u64;
        self.executed_macs += (rows * kept) as u64;
    }

    pub fn merge(&mut self, other: &MacCounter) {
        self.dense_macs += other.dense_macs;
        self.executed_macs += other.executed_macs;
    }

    pub fn ratio(&self) -> Result<f64> {
        mac_ratio(self)
    }
}

pub fn mac_ratio(counter: &MacCounter) -> Result<f64> {
    if counter.dense_macs == 0 {
        return Err(Error::invalid("MAC ratio undefined with zero dense MACs"));
    }
    Ok(counter.executed_macs as f64 / counter.dense_macs as f64)
}

/// `y = x Wᵀ` for a row-major `rows x cols` weight.
pub fn dense_matvec<T: Scalar>(x: &[T], w: &Matrix<T>, macs: &mut MacCounter) -> Result<Vec<T>> {
    ensure_len(w.cols(), x.len())?;
    let y = (0..w.rows())
        .map(|r| {
            let acc: f64 = w.row(r).iter().zip(x).map(|(a, b)| a.to_acc() * b.to_acc()).sum();
            T::from_acc(acc)
        })
        .collect();
    macs.record_dense(w.rows(), w.cols());
    Ok(y)
}

/// `y = x_S W_{:,S}ᵀ`: iterates only the kept channels of every row.
pub fn sparse_matvec<T: Scalar>(
    x: &[T],
    w: &Matrix<T>,
    mask: &ChannelMask,
    macs: &mut MacCounter,
) -> Result<Vec<T>> {
    ensure_len(w.cols(), x.len())?;
    ensure_len(w.cols(), mask.len())?;
    let kept = mask.kept_indices();
    let xs: Vec<f64> = kept.iter().map(|&i| x[i].to_acc()).collect();
    let y = (0..w.rows())
        .map(|r| {
            let row = w.row(r);
            let acc: f64 = kept.iter().zip(&xs).map(|(&i, xv)| row[i].to_acc() * xv).sum();
            T::from_acc(acc)
        })
        .collect();
    macs.record_sparse(w.rows(), w.cols(), kept.len());
    Ok(y)
}

/// Channel-major copy of an `out x in` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedWeight<T> {
    rows: usize,
    cols: usize,
    columns: Vec<T>,
}

impl<T: Scalar> PackedWeight<T> {
    pub fn from_matrix(w: &Matrix<T>) -> Self {
        PackedWeight { rows: w.rows(), cols: w.cols(), columns: w.transpose().into_vec() }
    }

    /// Output features.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Input channels.
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    fn column(&self, i: usize) -> &[T] {
        &self.columns[i * self.rows..(i + 1) * self.rows]
    }

    fn accumulate(&self, x: &[T], channels: &[usize], acc: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just checked.
            return unsafe { self.accumulate_avx2(x, channels, acc) };
        }
        self.accumulate_portable(x, channels, acc)
    }

    /// Same loop compiled with wider vectors. Each output element sees the
    /// same operations in the same order, so results match bit for bit.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn accumulate_avx2(&self, x: &[T], channels: &[usize], acc: &mut [f64]) {
        self.accumulate_portable(x, channels, acc)
    }

    /// `acc += sum_i x[i] * column(i)` over `channels`, four columns per
    /// pass over `acc` to cut accumulator traffic.
    #[inline(always)]
    fn accumulate_portable(&self, x: &[T], channels: &[usize], acc: &mut [f64]) {
        let n = self.rows;
        let acc = &mut acc[..n];
        let mut quads = channels.chunks_exact(4);
        for q in &mut quads {
            let (c0, c1, c2, c3) = (self.column(q[0]), self.column(q[1]), self.column(q[2]), self.column(q[3]));
            let (x0, x1, x2, x3) = (x[q[0]].to_acc(), x[q[1]].to_acc(), x[q[2]].to_acc(), x[q[3]].to_acc());
            for ((((a, &w0), &w1), &w2), &w3) in acc.iter_mut().zip(c0).zip(c1).zip(c2).zip(c3) {
                *a += x0 * w0.to_acc() + x1 * w1.to_acc() + x2 * w2.to_acc() + x3 * w3.to_acc();
            }
        }
        for &i in quads.remainder() {
            let (c, xv) = (self.column(i), x[i].to_acc());
            for (a, &w) in acc.iter_mut().zip(c) {
                *a += xv * w.to_acc();
            }
        }
    }

    fn finish(acc: &[f64], out: &mut [T]) {
        for (o, &a) in out.iter_mut().zip(acc.iter()) {
            *o = T::from_acc(a);
        }
    }

    /// Dense product written into `out`; `acc` is scratch of length `rows`.
    pub fn matvec_into(&self, x: &[T], acc: &mut [f64], out: &mut [T], macs: &mut MacCounter) -> Result<()> {
        ensure_len(self.cols, x.len())?;
        ensure_len(self.rows, out.len())?;
        ensure_len(self.rows, acc.len())?;
        acc.fill(0.0);
        // Same summation order as a gather over every channel, so keep-all
        // masks reproduce the dense result bit for bit.
        let mut buf = [0usize; 64];
        for start in (0..self.cols).step_by(64) {
            let end = (start + 64).min(self.cols);
            for (b, i) in buf.iter_mut().zip(start..end) {
                *b = i;
            }
            self.accumulate(x, &buf[..end - start], acc);
        }
        Self::finish(acc, out);
        macs.record_dense(self.rows, self.cols);
        Ok(())
    }

    /// Gather product over the listed channels only.
    pub fn gather_matvec_into(
        &self,
        x: &[T],
        kept: &[usize],
        acc: &mut [f64],
        out: &mut [T],
        macs: &mut MacCounter,
    ) -> Result<()> {
        ensure_len(self.cols, x.len())?;
        ensure_len(self.rows, out.len())?;
        ensure_len(self.rows, acc.len())?;
        if let Some(&bad) = kept.iter().find(|&&i| i >= self.cols) {
            return Err(Error::invalid(format!("channel {bad} out of range for {} inputs", self.cols)));
        }
        acc.fill(0.0);
        self.accumulate(x, kept, acc);
        Self::finish(acc, out);
        macs.record_sparse(self.rows, self.cols, kept.len());
        Ok(())
    }

    pub fn matvec(&self, x: &[T], macs: &mut MacCounter) -> Result<Vec<T>> {
        let mut acc = vec![0.0; self.rows];
        let mut out = vec![T::zero(); self.rows];
        self.matvec_into(x, &mut acc, &mut out, macs)?;
        Ok(out)
    }

    pub fn sparse_matvec(&self, x: &[T], mask: &ChannelMask, macs: &mut MacCounter) -> Result<Vec<T>> {
        ensure_len(self.cols, mask.len())?;
        let mut acc = vec![0.0; self.rows];
        let mut out = vec![T::zero(); self.rows];
        self.gather_matvec_into(x, mask.kept_indices(), &mut acc, &mut out, macs)?;
        Ok(out)
    }
}

/// One measured point of [`bench_matvec`].
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub sparsity: f64,
    pub ns_per_op: f64,
    pub gmacs_per_s: f64,
}

/// Median wall-clock of the channel-major gather product at each sparsity.
///
/// The weight, the input and the channel permutation are drawn once, so the
/// kept sets are nested across grid points.
pub fn bench_matvec(rows: usize, cols: usize, grid: &[f64], iters: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("benchmark dimensions must be positive"));
    }
    if let Some(s) = grid.iter().find(|s| !(0.0..1.0).contains(*s)) {
        return Err(Error::invalid(format!("sparsity {s} outside [0, 1)")));
    }
    let iters = iters.max(100);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = PackedWeight::from_matrix(&Matrix::from_vec(rows, cols, w)?);
    let x: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.shuffle(&mut rng);

    let mut acc = vec![0.0f64; rows];
    let mut out = vec![0.0f32; rows];
    let mut table = Vec::with_capacity(grid.len());
    for &sparsity in grid {
        let keep = ((1.0 - sparsity) * cols as f64).round() as usize;
        let mut kept = order[..keep].to_vec();
        kept.sort_unstable();
        let mut macs = MacCounter::default();
        for _ in 0..10 {
            w.gather_matvec_into(black_box(&x), black_box(&kept), &mut acc, &mut out, &mut macs)?;
        }
        let mut samples = Vec::with_capacity(iters);
        for _ in 0..iters {
            let start = Instant::now();
            w.gather_matvec_into(black_box(&x), black_box(&kept), &mut acc, &mut out, &mut macs)?;
            black_box(&out);
            samples.push(start.elapsed().as_nanos() as f64);
        }
        samples.sort_by(f64::total_cmp);
        let ns = samples[samples.len() / 2];
        let gmacs = if ns > 0.0 { (rows * keep) as f64 / ns } else { 0.0 };
        table.push(BenchRow { sparsity, ns_per_op: ns, gmacs_per_s: gmacs });
    }
    Ok(table)
}
