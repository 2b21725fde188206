//! Weight-aware channel importance, mask construction and threshold
//! calibration.
//!
//! Channel `i` of a projection input `x` scores `|x_i| * max(g_i, 1e-4)^alpha`
//! where `g_i` is the L2 norm of weight column `i`. A channel is kept when its
//! score reaches the layer threshold, which is calibrated once as a quantile
//! of scores pooled over every calibration token and channel of the layer.

use crate::error::{ensure_len, Error, Result};
use crate::kernels::{ChannelMask, MacCounter, PackedWeight};
use crate::model::LayerKind;
use crate::numerics::{kth_largest_threshold, Scalar};

/// Lower clamp applied to weight column norms before exponentiation.
pub const COL_NORM_FLOOR: f64 = 1e-4;

/// Everything a projection needs to mask its input at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityState<T> {
    alpha: f64,
    threshold: T,
    keep_ratio: f64,
    col_norm_pow: Vec<T>,
    pool_size: usize,
}

impl<T: Scalar> SparsityState<T> {
    /// A state whose threshold has not been calibrated yet. Until
    /// [`set_threshold`](Self::set_threshold) is called the threshold is the
    /// keep-all sentinel.
    pub fn new(col_norms: &[T], alpha: f64, keep_ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep_ratio) {
            return Err(Error::invalid(format!("keep ratio {keep_ratio} outside [0, 1]")));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!("exponent {alpha} must be finite and non-negative")));
        }
        Ok(SparsityState {
            alpha,
            threshold: T::neg_infinity(),
            keep_ratio,
            col_norm_pow: col_norm_pow(col_norms, alpha),
            pool_size: 0,
        })
    }

    pub fn with_threshold(col_norms: &[T], alpha: f64, keep_ratio: f64, threshold: T, pool_size: usize) -> Result<Self> {
        let mut s = Self::new(col_norms, alpha, keep_ratio)?;
        s.threshold = threshold;
        s.pool_size = pool_size;
        Ok(s)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    pub fn keep_ratio(&self) -> f64 {
        self.keep_ratio
    }

    pub fn col_norm_pow(&self) -> &[T] {
        &self.col_norm_pow
    }

    /// Number of scores the threshold was calibrated on (0 if never).
    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn width(&self) -> usize {
        self.col_norm_pow.len()
    }

    /// Changes the exponent; the cached powers are recomputed and the
    /// threshold must be recalibrated afterwards.
    pub fn set_alpha(&mut self, col_norms: &[T], alpha: f64) {
        self.alpha = alpha;
        self.col_norm_pow = col_norm_pow(col_norms, alpha);
    }

    pub fn set_keep_ratio(&mut self, keep_ratio: f64) {
        self.keep_ratio = keep_ratio;
    }

    pub fn set_threshold(&mut self, threshold: T, pool_size: usize) {
        self.threshold = threshold;
        self.pool_size = pool_size;
    }

    /// Calibrates the threshold on `pool` at the state's keep ratio.
    pub fn calibrate(&mut self, pool: &[T]) -> Result<()> {
        self.threshold = calibrate_threshold(pool, self.keep_ratio)?;
        self.pool_size = pool.len();
        Ok(())
    }
}

fn col_norm_pow<T: Scalar>(col_norms: &[T], alpha: f64) -> Vec<T> {
    col_norms
        .iter()
        .map(|g| {
            if alpha == 0.0 {
                T::one()
            } else {
                T::from_acc(g.to_acc().max(COL_NORM_FLOOR).powf(alpha))
            }
        })
        .collect()
}

/// `s_i = |x_i| * g_i^alpha` using the state's cached powers.
pub fn compute_scores<T: Scalar>(x: &[T], state: &SparsityState<T>) -> Result<Vec<T>> {
    ensure_len(state.width(), x.len())?;
    Ok(x.iter().zip(&state.col_norm_pow).map(|(v, p)| v.abs() * *p).collect())
}

pub(crate) fn push_scores<T: Scalar>(x: &[T], state: &SparsityState<T>, pool: &mut Vec<T>) {
    pool.extend(x.iter().zip(&state.col_norm_pow).map(|(v, p)| v.abs() * *p));
}

/// Kept indices of `x` under `state`, written into `kept`.
#[inline]
pub(crate) fn select_channels<T: Scalar>(x: &[T], state: &SparsityState<T>, kept: &mut Vec<usize>) {
    kept.clear();
    let tau = state.threshold;
    for (i, (v, p)) in x.iter().zip(&state.col_norm_pow).enumerate() {
        if v.abs() * *p >= tau {
            kept.push(i);
        }
    }
}

/// `m_i = [s_i >= tau]`.
pub fn build_mask<T: Scalar>(scores: &[T], threshold: T) -> ChannelMask {
    ChannelMask::from_bits(scores.iter().map(|&s| s >= threshold).collect())
}

/// Threshold that keeps a `keep_ratio` fraction of the pooled scores.
pub fn calibrate_threshold<T: Scalar>(pool: &[T], keep_ratio: f64) -> Result<T> {
    kth_largest_threshold(pool, keep_ratio)
}

/// Scores, masks and runs the gather product for one token.
pub fn apply_sparse_projection<T: Scalar>(
    x: &[T],
    weight: &PackedWeight<T>,
    state: &SparsityState<T>,
    macs: &mut MacCounter,
) -> Result<Vec<T>> {
    let scores = compute_scores(x, state)?;
    let mask = build_mask(&scores, state.threshold());
    weight.sparse_matvec(x, &mask, macs)
}

/// Sparsity states for the seven projections of a block, in
/// [`LayerKind::ALL`] order.
pub type BlockSparsity<T> = Vec<SparsityState<T>>;

/// Per-block sparsity for a whole model; `None` leaves a block dense.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSparsity<T> {
    pub blocks: Vec<Option<BlockSparsity<T>>>,
}

impl<T: Scalar> ModelSparsity<T> {
    pub fn dense(n_blocks: usize) -> Self {
        ModelSparsity { blocks: vec![None; n_blocks] }
    }

    pub fn block(&self, b: usize) -> Option<&BlockSparsity<T>> {
        self.blocks.get(b).and_then(Option::as_ref)
    }
}

/// Checks that `states` holds one state per projection with matching widths.
pub(crate) fn validate_block_states<T: Scalar>(
    block: usize,
    states: &[SparsityState<T>],
    widths: &[usize; 7],
) -> Result<()> {
    if states.len() != LayerKind::ALL.len() {
        let missing = LayerKind::ALL.get(states.len()).copied().unwrap_or(LayerKind::Down);
        return Err(Error::MissingLayerState { block, layer: missing.name().to_string() });
    }
    for (kind, (s, &w)) in LayerKind::ALL.iter().zip(states.iter().zip(widths)) {
        if s.width() != w {
            return Err(Error::shape(format!(
                "block {block} {}: state width {} != layer input width {w}",
                kind.name(),
                s.width()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::dense_matvec;
    use crate::numerics::{column_l2_norms, Matrix};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn score_examples() {
        let s = SparsityState::new(&[2.0f32, 1.0], 0.0, 1.0).unwrap();
        assert_eq!(compute_scores(&[1.0, -2.0], &s).unwrap(), vec![1.0, 2.0]);
        let s = SparsityState::new(&[2.0f32, 1.0], 1.0, 1.0).unwrap();
        assert_eq!(compute_scores(&[1.0, -2.0], &s).unwrap(), vec![2.0, 2.0]);
        let s = SparsityState::new(&[4.0f32, 1.0], 0.5, 1.0).unwrap();
        assert_eq!(compute_scores(&[0.5, 2.0], &s).unwrap(), vec![1.0, 2.0]);
        assert!(compute_scores(&[1.0], &s).is_err());
    }

    #[test]
    fn zero_norm_columns_are_clamped() {
        let s = SparsityState::new(&[0.0f64, 1.0], 1.0, 1.0).unwrap();
        assert_eq!(s.col_norm_pow()[0], 1e-4);
        assert!(s.col_norm_pow().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn mask_examples() {
        assert_eq!(build_mask(&[1.0f32, 2.0, 3.0], 2.0).bits(), &[false, true, true]);
        assert_eq!(build_mask(&[1.0f32, 2.0, 3.0], f32::NEG_INFINITY).kept_count(), 3);
        assert_eq!(build_mask(&[1.0f32, 2.0, 3.0], f32::INFINITY).kept_count(), 0);
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_threshold(&[1.0f32, 2.0, 3.0, 4.0], 0.5).unwrap(), 3.0);
        assert_eq!(calibrate_threshold(&[1.0f32, 2.0], 1.0).unwrap(), f32::NEG_INFINITY);
        assert!(matches!(calibrate_threshold::<f32>(&[], 0.5), Err(Error::EmptyPopulation)));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pool: Vec<f32> = (0..10_000).map(|_| rng.random_range(0.0..1.0)).collect();
        let tau = calibrate_threshold(&pool, 0.6).unwrap();
        let kept = pool.iter().filter(|&&v| v >= tau).count() as f64 / 10_000.0;
        assert!((0.5999..=0.6001).contains(&kept), "{kept}");
    }

    fn random_layer(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f32> {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn projection_keep_all_and_masked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_layer(&mut rng, 12, 16);
        let packed = PackedWeight::from_matrix(&w);
        let norms = column_l2_norms(&w);
        let x: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();

        let keep_all = SparsityState::new(&norms, 0.7, 1.0).unwrap();
        let y = apply_sparse_projection(&x, &packed, &keep_all, &mut MacCounter::default()).unwrap();
        let dense = dense_matvec(&x, &w, &mut MacCounter::default()).unwrap();
        for (a, b) in y.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-5);
        }

        let mut state = SparsityState::new(&norms, 1.0, 0.5).unwrap();
        state.calibrate(&compute_scores(&x, &state).unwrap()).unwrap();
        let mut macs = MacCounter::default();
        let y = apply_sparse_projection(&x, &packed, &state, &mut macs).unwrap();
        assert_eq!(macs.executed_macs, 12 * 8);
        let bits: Vec<bool> = x.iter().zip(&norms).map(|(v, g)| v.abs() * g >= state.threshold()).collect();
        let masked: Vec<f32> = x.iter().zip(&bits).map(|(&v, &b)| if b { v } else { 0.0 }).collect();
        let oracle = dense_matvec(&masked, &w, &mut MacCounter::default()).unwrap();
        for (a, b) in y.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn masks_adapt_per_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let norms: Vec<f32> = (0..64).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut state = SparsityState::new(&norms, 1.0, 0.5).unwrap();
        let tokens: Vec<Vec<f32>> =
            (0..32).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut pool = Vec::new();
        for t in &tokens {
            push_scores(t, &state, &mut pool);
        }
        state.calibrate(&pool).unwrap();

        let masks: Vec<ChannelMask> = tokens
            .iter()
            .map(|t| build_mask(&compute_scores(t, &state).unwrap(), state.threshold()))
            .collect();
        assert_ne!(masks[0], masks[1]);
        let counts: Vec<usize> = masks.iter().map(ChannelMask::kept_count).collect();
        assert!(counts.iter().any(|&c| c != counts[0]), "threshold masks are not top-k");
        let mean = counts.iter().sum::<usize>() as f64 / (32.0 * 64.0);
        assert!((mean - 0.5).abs() <= 0.02);
    }

    #[test]
    fn alpha_zero_is_magnitude_top_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let norms: Vec<f32> = (0..32).map(|_| rng.random_range(0.1..5.0)).collect();
        let x: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut state = SparsityState::new(&norms, 0.0, 0.25).unwrap();
        state.calibrate(&compute_scores(&x, &state).unwrap()).unwrap();
        let mask = build_mask(&compute_scores(&x, &state).unwrap(), state.threshold());
        let mut order: Vec<usize> = (0..32).collect();
        order.sort_by(|&a, &b| x[b].abs().partial_cmp(&x[a].abs()).unwrap());
        let mut top: Vec<usize> = order[..8].to_vec();
        top.sort_unstable();
        assert_eq!(mask.kept_indices(), &top[..]);
    }

    proptest! {
        #[test]
        fn scale_equivariance(
            x in proptest::collection::vec(-4.0f64..4.0, 1..48),
            c in 0.01f64..100.0,
            alpha in 0.0f64..1.5,
        ) {
            let norms: Vec<f64> = (0..x.len()).map(|i| 0.25 + (i % 7) as f64).collect();
            let state = SparsityState::new(&norms, alpha, 1.0).unwrap();
            let base = compute_scores(&x, &state).unwrap();
            let scaled_x: Vec<f64> = x.iter().map(|v| v * c).collect();
            let scaled = compute_scores(&scaled_x, &state).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((a * c - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
            let tau = base[0];
            let m1 = build_mask(&base, tau);
            let m2 = build_mask(&base.iter().map(|v| v * c).collect::<Vec<_>>(), tau * c);
            prop_assert_eq!(m1, m2);
        }

        #[test]
        fn larger_column_never_ranks_lower(
            a in 0.0f64..1.0, g1 in 0.0f64..10.0, g2 in 0.0f64..10.0, alpha in 0.0f64..1.5,
        ) {
            let state = SparsityState::new(&[g1, g2], alpha, 1.0).unwrap();
            let s = compute_scores(&[a, -a], &state).unwrap();
            if g1 > g2 {
                prop_assert!(s[0] >= s[1]);
            } else if g2 > g1 {
                prop_assert!(s[1] >= s[0]);
            }
        }
    }
}
