//! Block-wise grid search for per-layer weight exponents and final
//! threshold fixing.
//!
//! For a block with cached dense inputs `X` and outputs `Y`, a sparse
//! configuration assigns every projection an exponent and a keep ratio.
//! Thresholds are calibrated stage by stage on the inputs each projection
//! actually receives (so a projection downstream of a sparsified one sees
//! the already-sparsified activations), and the configuration is scored by
//! the mean squared error between `Y` and the sparse block output.

use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{run_block, Block, BlockActivations, LayerKind, ModelConfig, ProjMode, Stage, ToyTransformer};
use crate::kernels::MacCounter;
use crate::numerics::{sum_squared_error, Matrix, Scalar};
use crate::scoring::{ModelSparsity, SparsityState};

/// One value per projection, in [`LayerKind::ALL`] order.
pub type LayerValues = [f64; 7];

/// Candidate exponents `lo, lo + step, ..., hi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        AlphaGrid { lo: 0.0, hi: 1.5, step: 0.05 }
    }
}

impl AlphaGrid {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(lo >= 0.0 && hi >= lo && step > 0.0 && hi.is_finite()) {
            return Err(Error::invalid(format!("bad alpha grid {lo}:{hi}:{step}")));
        }
        Ok(AlphaGrid { lo, hi, step })
    }

    pub fn single(alpha: f64) -> Self {
        AlphaGrid { lo: alpha, hi: alpha, step: 1.0 }
    }

    pub fn candidates(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| ((self.lo + i as f64 * self.step) * 1e10).round() / 1e10).collect()
    }
}

impl FromStr for AlphaGrid {
    type Err = Error;

    /// Parses `lo:hi:step`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::invalid(format!("alpha grid `{s}` is not lo:hi:step")));
        }
        let num = |p: &str| p.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad number `{p}` in alpha grid")));
        AlphaGrid::new(num(parts[0])?, num(parts[1])?, num(parts[2])?)
    }
}

impl std::fmt::Display for AlphaGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.lo, self.hi, self.step)
    }
}

/// Dense inputs captured at a block's entry and the block's dense outputs,
/// one matrix per calibration sequence.
#[derive(Clone, Debug)]
pub struct BlockCalibCache<T> {
    pub inputs: Vec<Matrix<T>>,
    pub dense_out: Vec<Matrix<T>>,
}

impl<T: Scalar> BlockCalibCache<T> {
    pub fn token_count(&self) -> usize {
        self.inputs.iter().map(Matrix::rows).sum()
    }
}

/// Runs sparse configurations of one block over its calibration cache.
pub struct BlockEvaluator<'a, T> {
    block: &'a Block<T>,
    cfg: &'a ModelConfig,
    cache: &'a BlockCalibCache<T>,
    elements: usize,
}

impl<'a, T: Scalar> BlockEvaluator<'a, T> {
    pub fn new(block: &'a Block<T>, cfg: &'a ModelConfig, cache: &'a BlockCalibCache<T>) -> Result<Self> {
        if cache.inputs.is_empty() || cache.token_count() == 0 {
            return Err(Error::EmptyCalibration);
        }
        if cache.inputs.len() != cache.dense_out.len() {
            return Err(Error::shape("calibration inputs and outputs disagree"));
        }
        let elements = cache.dense_out.iter().map(|m| m.rows() * m.cols()).sum();
        Ok(BlockEvaluator { block, cfg, cache, elements })
    }

    /// Uncalibrated states for the given exponents and keep ratios.
    pub fn states(&self, alphas: &LayerValues, keep: &LayerValues) -> Result<Vec<SparsityState<T>>> {
        LayerKind::ALL
            .iter()
            .map(|&k| SparsityState::new(self.block.layer(k).col_norms(), alphas[k.index()], keep[k.index()]))
            .collect()
    }

    pub fn col_norms(&self, kind: LayerKind) -> &[T] {
        self.block.layer(kind).col_norms()
    }

    /// Calibrates every threshold and runs the whole block.
    pub fn run(&self, states: &mut [SparsityState<T>]) -> Result<(f64, BlockActivations<T>)> {
        let mut acts = BlockActivations::new(self.block, self.cfg, self.cache.inputs.clone());
        self.finish(states, &mut acts, Stage::Attention)?;
        Ok((self.mse(&acts), acts))
    }

    /// Like [`run`](Self::run) but reuses the stages of `base` that precede
    /// `from`. `base` must have been produced with the same states for every
    /// projection before `from`.
    pub fn run_from(
        &self,
        states: &mut [SparsityState<T>],
        base: &BlockActivations<T>,
        from: Stage,
    ) -> Result<(f64, BlockActivations<T>)> {
        let mut acts = base.clone();
        self.finish(states, &mut acts, from)?;
        Ok((self.mse(&acts), acts))
    }

    fn finish(&self, states: &mut [SparsityState<T>], acts: &mut BlockActivations<T>, from: Stage) -> Result<()> {
        let mut mode = ProjMode::Calibrate { states };
        run_block(self.block, self.cfg, acts, from, &mut mode, None, &mut MacCounter::default())
    }

    /// Mean squared error of `acts.output` against the dense outputs.
    pub fn mse(&self, acts: &BlockActivations<T>) -> f64 {
        let sse: f64 = acts
            .output
            .iter()
            .zip(&self.cache.dense_out)
            .map(|(a, b)| sum_squared_error(a.data(), b.data()))
            .sum();
        sse / self.elements as f64
    }
}

#[derive(Clone, Debug)]
pub struct AlphaSearch<T> {
    pub alphas: LayerValues,
    /// States calibrated at the returned exponents.
    pub states: Vec<SparsityState<T>>,
    pub block_mse: f64,
    /// Block MSE at the lowest grid exponent everywhere (the start point).
    pub start_mse: f64,
    /// Coordinate-descent passes run, including the final unchanged one.
    pub passes: usize,
    pub converged: bool,
    /// Block MSE of every grid candidate per layer, from the last pass.
    pub curves: Vec<Vec<f64>>,
}

/// Coordinate descent over the exponent grid.
///
/// Layers are visited in q, k, v, o, gate, up, down order; each is scanned
/// over every grid candidate with the others held at their current values,
/// thresholds recalibrated at each candidate, and set to the candidate with
/// the lowest block MSE (ties go to the smaller exponent). Passes repeat
/// until one changes nothing or `max_passes` is reached.
pub fn search_alpha_block<T: Scalar>(
    block: &Block<T>,
    cfg: &ModelConfig,
    cache: &BlockCalibCache<T>,
    keep_ratios: &LayerValues,
    grid: &AlphaGrid,
    max_passes: usize,
) -> Result<AlphaSearch<T>> {
    let ev = BlockEvaluator::new(block, cfg, cache)?;
    let candidates = grid.candidates();
    let mut alphas = [candidates[0]; 7];
    let mut states = ev.states(&alphas, keep_ratios)?;
    let (start_mse, mut acts) = ev.run(&mut states)?;

    // Keep-all layers mask nothing, so every exponent gives the dense output.
    if keep_ratios.iter().all(|&r| r >= 1.0) {
        let curves = vec![vec![start_mse; candidates.len()]; 7];
        return Ok(AlphaSearch { alphas, states, block_mse: start_mse, start_mse, passes: 1, converged: true, curves });
    }

    let mut mse = start_mse;
    let mut curves = vec![Vec::new(); 7];
    let mut passes = 0;
    let mut converged = false;
    while passes < max_passes.max(1) {
        passes += 1;
        let mut changed = false;
        for kind in LayerKind::ALL {
            let i = kind.index();
            let mut curve = Vec::with_capacity(candidates.len());
            let mut best: Option<(f64, f64, Vec<SparsityState<T>>, BlockActivations<T>)> = None;
            for &alpha in &candidates {
                let mut trial = states.clone();
                trial[i].set_alpha(ev.col_norms(kind), alpha);
                let (m, a) = ev.run_from(&mut trial, &acts, kind.stage())?;
                curve.push(m);
                if best.as_ref().map_or(true, |b| m < b.1) {
                    best = Some((alpha, m, trial, a));
                }
            }
            let (alpha, m, trial, a) = best.expect("grid is non-empty");
            if alpha != alphas[i] {
                changed = true;
            }
            alphas[i] = alpha;
            mse = m;
            states = trial;
            acts = a;
            curves[i] = curve;
        }
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(AlphaSearch { alphas, states, block_mse: mse, start_mse, passes, converged, curves })
}

/// Runs [`search_alpha_block`] on every block in parallel.
pub fn search_alphas<T: Scalar>(
    model: &ToyTransformer<T>,
    caches: &[BlockCalibCache<T>],
    keep_ratios: &[LayerValues],
    grid: &AlphaGrid,
    max_passes: usize,
) -> Result<Vec<AlphaSearch<T>>> {
    let n = model.config().n_blocks;
    if caches.len() != n || keep_ratios.len() != n {
        return Err(Error::invalid(format!(
            "{n} blocks but {} caches and {} keep-ratio rows",
            caches.len(),
            keep_ratios.len()
        )));
    }
    (0..n)
        .into_par_iter()
        .map(|b| search_alpha_block(model.block(b), model.config(), &caches[b], &keep_ratios[b], grid, max_passes))
        .collect()
}

/// Final per-layer thresholds at the chosen exponents and keep ratios.
pub fn fix_thresholds<T: Scalar>(
    model: &ToyTransformer<T>,
    keep_ratios: &[LayerValues],
    alphas: &[LayerValues],
    caches: &[BlockCalibCache<T>],
) -> Result<ModelSparsity<T>> {
    let n = model.config().n_blocks;
    if keep_ratios.len() != n || alphas.len() != n {
        return Err(Error::invalid("keep ratios and exponents must cover every block"));
    }
    let mut blocks = Vec::with_capacity(n);
    for b in 0..n {
        let cache = caches
            .get(b)
            .ok_or_else(|| Error::invalid(format!("missing calibration activations for block {b}")))?;
        let ev = BlockEvaluator::new(model.block(b), model.config(), cache)?;
        let mut states = ev.states(&alphas[b], &keep_ratios[b])?;
        ev.run(&mut states)?;
        blocks.push(Some(states));
    }
    Ok(ModelSparsity { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{capture_block_inputs, CalibrationSet};
    use crate::model::init_toy_model;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { n_blocks: 2, d_model: 16, n_heads: 2, d_ff: 24, vocab_size: 256, max_seq: 32, rms_eps: 1e-5 }
    }

    fn fixture() -> (ToyTransformer<f32>, Vec<BlockCalibCache<f32>>) {
        let model = init_toy_model::<f32>(&tiny_cfg(), 11).unwrap();
        let text = "calibration text for a tiny toy transformer, repeated a few times. ".repeat(4);
        let calib = CalibrationSet::from_text(&text, 16, 6);
        let cache = capture_block_inputs(&model, &calib).unwrap();
        (model, cache.blocks)
    }

    #[test]
    fn grid_candidates() {
        let c = AlphaGrid::default().candidates();
        assert_eq!(c.len(), 31);
        assert_eq!(c[0], 0.0);
        assert_eq!(c[3], 0.15);
        assert_eq!(c[30], 1.5);
        assert_eq!("0:1.5:0.05".parse::<AlphaGrid>().unwrap(), AlphaGrid::default());
        assert!("0:1".parse::<AlphaGrid>().is_err());
        assert!("1:0:0.1".parse::<AlphaGrid>().is_err());
        assert_eq!(AlphaGrid::single(0.7).candidates(), vec![0.7]);
    }

    #[test]
    fn single_candidate_grid_is_forced() {
        let (model, caches) = fixture();
        let r = search_alpha_block(model.block(0), model.config(), &caches[0], &[0.5; 7], &AlphaGrid::single(0.35), 4)
            .unwrap();
        assert_eq!(r.alphas, [0.35; 7]);
    }

    #[test]
    fn search_result_is_grid_minimum() {
        let (model, caches) = fixture();
        let grid = AlphaGrid::new(0.0, 1.5, 0.25).unwrap();
        let keep = [0.6, 0.6, 0.5, 0.5, 0.4, 0.5, 0.5];
        let r = search_alpha_block(model.block(1), model.config(), &caches[1], &keep, &grid, 10).unwrap();
        assert!(r.converged);
        assert!(r.block_mse <= r.start_mse);
        let ev = BlockEvaluator::new(model.block(1), model.config(), &caches[1]).unwrap();
        for kind in LayerKind::ALL {
            for alpha in grid.candidates() {
                let mut alphas = r.alphas;
                alphas[kind.index()] = alpha;
                let mut states = ev.states(&alphas, &keep).unwrap();
                let (m, _) = ev.run(&mut states).unwrap();
                assert!(m >= r.block_mse, "{} at {alpha}: {m} < {}", kind.name(), r.block_mse);
            }
        }
    }

    #[test]
    fn search_leaves_block_untouched() {
        let (model, caches) = fixture();
        let before = crate::model::block_forward(model.block(0), model.config(), &caches[0].inputs[0], None).unwrap();
        search_alpha_block(model.block(0), model.config(), &caches[0], &[0.5; 7], &AlphaGrid::new(0.0, 1.0, 0.5).unwrap(), 2)
            .unwrap();
        let after = crate::model::block_forward(model.block(0), model.config(), &caches[0].inputs[0], None).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn fixed_thresholds_hit_keep_ratio_and_are_deterministic() {
        let (model, caches) = fixture();
        let keep = vec![[0.5; 7]; 2];
        let alphas = vec![[0.0; 7]; 2];
        let a = fix_thresholds(&model, &keep, &alphas, &caches).unwrap();
        let b = fix_thresholds(&model, &keep, &alphas, &caches).unwrap();
        assert_eq!(a, b);

        // q_proj sees the normed block input, so its pool is recomputable here.
        let state = &a.block(0).unwrap()[LayerKind::Q.index()];
        let acts = BlockActivations::new(model.block(0), model.config(), caches[0].inputs.clone());
        let mut pool = Vec::new();
        for x in acts.layer_input(LayerKind::Q) {
            pool.extend(x.data().iter().map(|v| v.abs()));
        }
        let kept = pool.iter().filter(|&&s| s >= state.threshold()).count();
        assert_eq!(state.pool_size(), pool.len());
        assert!((kept as f64 / pool.len() as f64 - 0.5).abs() <= 1.0 / pool.len() as f64);

        let all = fix_thresholds(&model, &vec![[1.0; 7]; 2], &alphas, &caches).unwrap();
        for s in all.blocks.iter().flatten().flatten() {
            assert_eq!(s.threshold(), f32::NEG_INFINITY);
        }
        assert!(fix_thresholds(&model, &keep, &alphas, &caches[..1]).is_err());
    }
}
