//! Sparsity allocation at two granularities.
//!
//! A mutation-only evolutionary search distributes a global budget over
//! blocks while holding the parameter-weighted mean at the target, scoring
//! candidates by the KL divergence of the sparse model's next-token
//! distribution from the dense one. Each block's share is then split across
//! its seven projections by a greedy search on block reconstruction error.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibrate::{BlockCalibCache, BlockEvaluator, LayerValues};
use crate::data::CalibrationCache;
use crate::error::{Error, Result};
use crate::kernels::MacCounter;
use crate::model::{run_blocks, Block, BlockActivations, LayerKind, ModelConfig, ToyTransformer};
use crate::numerics::{kl_from_logits, Matrix, Scalar};
use crate::scoring::{BlockSparsity, ModelSparsity, SparsityState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvoParams {
    pub generations: usize,
    pub offspring: usize,
    /// Mutation step, as a sparsity fraction.
    pub step: f64,
    /// Fraction of blocks incremented per mutation (at least one).
    pub mutable_fraction: f64,
    pub seed: u64,
}

impl Default for EvoParams {
    fn default() -> Self {
        EvoParams { generations: 400, offspring: 64, step: 0.005, mutable_fraction: 0.1, seed: 0 }
    }
}

impl EvoParams {
    /// A smaller search that finishes in minutes on a toy model.
    pub fn desk() -> Self {
        EvoParams { generations: 40, offspring: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.offspring == 0 || !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::invalid("offspring count and mutation step must be positive"));
        }
        if !(self.mutable_fraction > 0.0 && self.mutable_fraction <= 1.0) {
            return Err(Error::invalid(format!("mutable fraction {} outside (0, 1]", self.mutable_fraction)));
        }
        Ok(())
    }
}

pub fn weighted_average(values: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total
}

/// Increments random blocks by the mutation step, then decrements random
/// non-empty blocks until the weighted average is back at or under `target`.
pub fn mutate_candidate(parent: &[f64], weights: &[f64], target: f64, params: &EvoParams, rng: &mut impl Rng) -> Vec<f64> {
    let n = parent.len();
    let mut p = parent.to_vec();
    let flips = ((n as f64 * params.mutable_fraction + 1e-9).floor() as usize).max(1);
    for _ in 0..flips {
        let b = rng.random_range(0..n);
        p[b] = (p[b] + params.step).min(1.0);
    }
    let mut nonzero: Vec<usize> = Vec::with_capacity(n);
    while weighted_average(&p, weights) > target + 1e-9 {
        nonzero.clear();
        nonzero.extend((0..n).filter(|&b| p[b] > 0.0));
        let b = nonzero[rng.random_range(0..nonzero.len())];
        p[b] = (p[b] - params.step).max(0.0);
    }
    p
}

/// Mean over sequences of the token-averaged `KL(dense || sparse)`.
pub fn mean_sequence_kl<T: Scalar>(dense: &[Matrix<T>], sparse: &[Matrix<T>]) -> Result<f64> {
    if dense.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    crate::error::ensure_len(dense.len(), sparse.len())?;
    let mut total = 0.0;
    for (d, s) in dense.iter().zip(sparse) {
        if d.rows() != s.rows() || d.cols() != s.cols() || d.rows() == 0 {
            return Err(Error::shape("dense and sparse logits differ in shape"));
        }
        let mut seq = 0.0;
        for r in 0..d.rows() {
            seq += kl_from_logits(d.row(r), s.row(r))?;
        }
        total += seq / d.rows() as f64;
    }
    Ok(total / dense.len() as f64)
}

/// The coarse-search loss: every projection of block `b` keeps `1 - p_b`
/// of its channels at exponent 0, with thresholds calibrated per block and
/// ratio on the dense calibration activations and memoized.
pub struct AllocationObjective<'a, T> {
    model: &'a ToyTransformer<T>,
    calib: &'a CalibrationCache<T>,
    memo: HashMap<(usize, i64), BlockSparsity<T>>,
}

fn ratio_key(p: f64) -> i64 {
    (p * 1e9).round() as i64
}

impl<'a, T: Scalar> AllocationObjective<'a, T> {
    pub fn new(model: &'a ToyTransformer<T>, calib: &'a CalibrationCache<T>) -> Result<Self> {
        if calib.sequences.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        if calib.blocks.len() != model.config().n_blocks {
            return Err(Error::invalid("calibration cache does not cover every block"));
        }
        Ok(AllocationObjective { model, calib, memo: HashMap::new() })
    }

    /// Calibrates any thresholds the candidates need that are not memoized.
    pub fn prepare<'c>(&mut self, candidates: impl IntoIterator<Item = &'c [f64]>) -> Result<()> {
        for cand in candidates {
            self.check(cand)?;
            for (b, &p) in cand.iter().enumerate() {
                if p <= 0.0 || self.memo.contains_key(&(b, ratio_key(p))) {
                    continue;
                }
                let ev = BlockEvaluator::new(self.model.block(b), self.model.config(), &self.calib.blocks[b])?;
                let mut states = ev.states(&[0.0; 7], &[1.0 - p; 7])?;
                ev.run(&mut states)?;
                self.memo.insert((b, ratio_key(p)), states);
            }
        }
        Ok(())
    }

    fn check(&self, cand: &[f64]) -> Result<()> {
        crate::error::ensure_len(self.model.config().n_blocks, cand.len())?;
        if let Some(p) = cand.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("block sparsity {p} outside [0, 1]")));
        }
        Ok(())
    }

    /// Model sparsity for a prepared candidate.
    pub fn sparsity(&self, cand: &[f64]) -> Result<ModelSparsity<T>> {
        self.check(cand)?;
        let blocks = cand
            .iter()
            .enumerate()
            .map(|(b, &p)| {
                if p <= 0.0 {
                    return Ok(None);
                }
                self.memo
                    .get(&(b, ratio_key(p)))
                    .cloned()
                    .map(Some)
                    .ok_or_else(|| Error::invalid(format!("thresholds for block {b} at {p} were not prepared")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelSparsity { blocks })
    }

    /// Loss of a prepared candidate and the inputs each block saw.
    pub fn trace(&self, cand: &[f64]) -> Result<(f64, Vec<Vec<Matrix<T>>>)> {
        let sparsity = self.sparsity(cand)?;
        let mut inputs = Vec::with_capacity(cand.len());
        let hidden = run_blocks(
            self.model,
            self.calib.blocks[0].inputs.clone(),
            0..cand.len(),
            Some(&sparsity),
            None,
            None,
            &mut MacCounter::default(),
            |_, acts: &BlockActivations<T>| inputs.push(acts.input.clone()),
        )?;
        Ok((self.finish(&hidden)?, inputs))
    }

    /// Loss of a prepared candidate, starting at block `start` from `inputs`
    /// (which must be what the candidate's earlier blocks produce).
    pub fn loss_from(&self, cand: &[f64], start: usize, inputs: &[Matrix<T>]) -> Result<f64> {
        let sparsity = self.sparsity(cand)?;
        let hidden = run_blocks(
            self.model,
            inputs.to_vec(),
            start..cand.len(),
            Some(&sparsity),
            None,
            None,
            &mut MacCounter::default(),
            |_, _| {},
        )?;
        self.finish(&hidden)
    }

    pub fn loss(&self, cand: &[f64]) -> Result<f64> {
        self.loss_from(cand, 0, &self.calib.blocks[0].inputs)
    }

    fn finish(&self, hidden: &[Matrix<T>]) -> Result<f64> {
        let logits = hidden.iter().map(|h| self.model.logits(h)).collect::<Result<Vec<_>>>()?;
        mean_sequence_kl(&self.calib.dense_logits, &logits)
    }
}

/// The KL loss of one block allocation.
pub fn evaluate_allocation<T: Scalar>(
    candidate: &[f64],
    model: &ToyTransformer<T>,
    calib: &CalibrationCache<T>,
) -> Result<f64> {
    let mut obj = AllocationObjective::new(model, calib)?;
    obj.prepare([candidate])?;
    obj.loss(candidate)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockAllocation {
    pub sparsities: Vec<f64>,
    pub target: f64,
    /// Generation in which the returned allocation was found (0 = uniform).
    pub generation: usize,
    pub loss: f64,
    pub uniform_loss: f64,
    /// Incumbent loss after each generation, starting with the uniform one.
    pub incumbent_losses: Vec<f64>,
    /// Weighted average sparsity of every evaluated offspring.
    pub candidate_averages: Vec<f64>,
    pub evaluations: usize,
}

/// Evolutionary search from the uniform allocation. The parent takes part
/// in selection, so the incumbent loss never increases.
pub fn block_level_allocation<T: Scalar>(
    model: &ToyTransformer<T>,
    calib: &CalibrationCache<T>,
    target: f64,
    params: &EvoParams,
) -> Result<BlockAllocation> {
    params.validate()?;
    if !(0.0..1.0).contains(&target) {
        return Err(Error::invalid(format!("target sparsity {target} outside [0, 1)")));
    }
    let n = model.config().n_blocks;
    let weights = model.block_weights();
    let mut parent = vec![target; n];
    let mut obj = AllocationObjective::new(model, calib)?;
    obj.prepare([parent.as_slice()])?;
    let (uniform_loss, mut parent_inputs) = obj.trace(&parent)?;
    let mut result = BlockAllocation {
        sparsities: parent.clone(),
        target,
        generation: 0,
        loss: uniform_loss,
        uniform_loss,
        incumbent_losses: vec![uniform_loss],
        candidate_averages: Vec::new(),
        evaluations: 1,
    };
    if target == 0.0 {
        return Ok(result);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for generation in 1..=params.generations {
        let offspring: Vec<Vec<f64>> =
            (0..params.offspring).map(|_| mutate_candidate(&parent, &weights, target, params, &mut rng)).collect();
        result.candidate_averages.extend(offspring.iter().map(|c| weighted_average(c, &weights)));
        obj.prepare(offspring.iter().map(Vec::as_slice))?;

        let obj_ref = &obj;
        let parent_ref = &parent;
        let inputs_ref = &parent_inputs;
        let parent_loss = result.loss;
        let losses = offspring
            .par_iter()
            .map(|c| match c.iter().zip(parent_ref).position(|(a, b)| a != b) {
                Some(start) => obj_ref.loss_from(c, start, &inputs_ref[start]),
                None => Ok(parent_loss),
            })
            .collect::<Result<Vec<f64>>>()?;
        result.evaluations += offspring.len();

        let mut best: Option<usize> = None;
        for (i, &l) in losses.iter().enumerate() {
            if l < best.map_or(result.loss, |b| losses[b]) {
                best = Some(i);
            }
        }
        if let Some(i) = best {
            parent = offspring[i].clone();
            result.loss = losses[i];
            result.generation = generation;
            parent_inputs = obj.trace(&parent)?.1;
        }
        result.incumbent_losses.push(result.loss);
        log::debug!("generation {generation}: loss {:.6e}", result.loss);
    }
    result.sparsities = parent;
    Ok(result)
}

/// One iteration of the greedy layer search.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyStep {
    pub step: usize,
    pub layer: usize,
    pub increment: f64,
    pub error: f64,
    /// Layer sparsities before this step.
    pub before: Vec<f64>,
    /// Every layer tried this step with its increment and resulting error.
    pub trials: Vec<(usize, f64, f64)>,
}

/// Reconstruction error of trial allocations, for the greedy search.
pub trait StepEvaluator {
    /// Error when layer `layer` moves to `p[layer]` and every other layer
    /// stays at its committed value.
    fn trial(&mut self, layer: usize, p: &[f64]) -> Result<f64>;

    /// Makes the last trial of `layer` the new committed state.
    fn commit(&mut self, layer: usize);
}

/// Parameter-weighted mean of layer sparsities.
pub fn effective_sparsity(p: &[f64], weights: &[f64]) -> f64 {
    weighted_average(p, weights)
}

/// Adds `step` to whichever layer's increment raises the error least until
/// the weighted sparsity reaches `budget`. The last increment is cut short
/// so the result lands on the budget instead of overshooting it.
pub fn greedy_allocate(
    weights: &[f64],
    budget: f64,
    step: f64,
    eval: &mut impl StepEvaluator,
) -> Result<(Vec<f64>, Vec<GreedyStep>)> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::invalid(format!("budget {budget} outside [0, 1]")));
    }
    if !(step > 0.0) {
        return Err(Error::invalid("greedy step must be positive"));
    }
    let total: f64 = weights.iter().sum();
    let mut p = vec![0.0; weights.len()];
    let mut trace = Vec::new();
    loop {
        let needed = budget - effective_sparsity(&p, weights);
        if needed <= 1e-9 {
            break;
        }
        let mut trials = Vec::new();
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for l in 0..p.len() {
            if p[l] >= 1.0 || weights[l] <= 0.0 {
                continue;
            }
            let inc = step.min(1.0 - p[l]).min(needed * total / weights[l]);
            let mut trial = p.clone();
            trial[l] = if p[l] + inc > 1.0 - 1e-12 { 1.0 } else { p[l] + inc };
            let err = eval.trial(l, &trial)?;
            trials.push((l, trial[l] - p[l], err));
            if best.as_ref().map_or(true, |b| err < b.1) {
                best = Some((l, err, trial));
            }
        }
        let (layer, error, chosen) = best.ok_or(Error::BudgetUnreachable { budget })?;
        // Re-run the winner so the evaluator's last trial is the one committed.
        if trials.last().map(|t| t.0) != Some(layer) {
            eval.trial(layer, &chosen)?;
        }
        eval.commit(layer);
        let increment = chosen[layer] - p[layer];
        trace.push(GreedyStep { step: trace.len(), layer, increment, error, before: p.clone(), trials });
        p = chosen;
    }
    Ok((p, trace))
}

/// Greedy search over the seven projections of a real block.
pub struct BlockStepEvaluator<'a, T> {
    ev: BlockEvaluator<'a, T>,
    states: Vec<SparsityState<T>>,
    acts: BlockActivations<T>,
    pending: Option<(usize, Vec<SparsityState<T>>, BlockActivations<T>)>,
}

impl<'a, T: Scalar> BlockStepEvaluator<'a, T> {
    pub fn new(block: &'a Block<T>, cfg: &'a ModelConfig, cache: &'a BlockCalibCache<T>) -> Result<Self> {
        let ev = BlockEvaluator::new(block, cfg, cache)?;
        let mut states = ev.states(&[0.0; 7], &[1.0; 7])?;
        let (_, acts) = ev.run(&mut states)?;
        Ok(BlockStepEvaluator { ev, states, acts, pending: None })
    }
}

impl<T: Scalar> StepEvaluator for BlockStepEvaluator<'_, T> {
    fn trial(&mut self, layer: usize, p: &[f64]) -> Result<f64> {
        let kind = LayerKind::ALL[layer];
        let mut states = self.states.clone();
        states[layer].set_keep_ratio(1.0 - p[layer]);
        let (err, acts) = self.ev.run_from(&mut states, &self.acts, kind.stage())?;
        self.pending = Some((layer, states, acts));
        Ok(err)
    }

    fn commit(&mut self, layer: usize) {
        if let Some((l, states, acts)) = self.pending.take() {
            debug_assert_eq!(l, layer);
            self.states = states;
            self.acts = acts;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAllocation {
    pub sparsities: LayerValues,
    pub budget: f64,
    pub trace: Vec<GreedyStep>,
}

impl LayerAllocation {
    pub fn keep_ratios(&self) -> LayerValues {
        self.sparsities.map(|p| 1.0 - p)
    }

    /// Final block reconstruction error (0 if no step was taken).
    pub fn error(&self) -> f64 {
        self.trace.last().map_or(0.0, |s| s.error)
    }
}

pub fn layer_weights(cfg: &ModelConfig) -> Vec<f64> {
    cfg.layer_params().iter().map(|&p| p as f64).collect()
}

/// Splits a block's budget across its projections at exponent 0.
pub fn intra_block_allocation<T: Scalar>(
    block: &Block<T>,
    cfg: &ModelConfig,
    budget: f64,
    step: f64,
    cache: &BlockCalibCache<T>,
) -> Result<LayerAllocation> {
    let mut eval = BlockStepEvaluator::new(block, cfg, cache)?;
    let (p, trace) = greedy_allocate(&layer_weights(cfg), budget, step, &mut eval)?;
    let mut sparsities = [0.0; 7];
    sparsities.copy_from_slice(&p);
    Ok(LayerAllocation { sparsities, budget, trace })
}

/// [`intra_block_allocation`] for every block, in parallel.
pub fn allocate_layers<T: Scalar>(
    model: &ToyTransformer<T>,
    caches: &[BlockCalibCache<T>],
    budgets: &[f64],
    step: f64,
) -> Result<Vec<LayerAllocation>> {
    let n = model.config().n_blocks;
    if caches.len() != n || budgets.len() != n {
        return Err(Error::invalid("block budgets and caches must cover every block"));
    }
    (0..n)
        .into_par_iter()
        .map(|b| intra_block_allocation(model.block(b), model.config(), budgets[b], step, &caches[b]))
        .collect()
}
