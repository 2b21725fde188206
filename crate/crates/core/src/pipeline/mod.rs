//! End-to-end runs: allocation, exponent search, threshold fixing and the
//! plan, plus evaluation and reporting on top of them.

pub mod commands;
pub mod eval;
pub mod plan;
pub mod report;

use std::time::Instant;

use crate::allocate::{allocate_layers, block_level_allocation, BlockAllocation, EvoParams, LayerAllocation};
use crate::calibrate::{fix_thresholds, search_alphas, AlphaGrid, AlphaSearch, LayerValues};
use crate::data::{CalibrationCache, CalibrationSet};
use crate::error::{Result, StageExt};
use crate::model::ToyTransformer;
use crate::numerics::Scalar;
use crate::scoring::ModelSparsity;

pub use eval::{evaluate, EvalReport, PrefillPolicy};
pub use plan::SparsityPlan;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub target_sparsity: f64,
    pub evo: EvoParams,
    pub alpha_grid: AlphaGrid,
    /// Upper bound on coordinate-descent passes per block.
    pub alpha_passes: usize,
    pub greedy_step: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_sparsity: 0.5,
            evo: EvoParams::default(),
            alpha_grid: AlphaGrid::default(),
            alpha_passes: 8,
            greedy_step: 0.05,
        }
    }
}

impl PipelineConfig {
    /// Stable text form, hashed into report provenance lines.
    pub fn describe(&self) -> String {
        format!(
            "target={} evo={}x{} step={} frac={} seed={} grid={} passes={} greedy={}",
            self.target_sparsity,
            self.evo.generations,
            self.evo.offspring,
            self.evo.step,
            self.evo.mutable_fraction,
            self.evo.seed,
            self.alpha_grid,
            self.alpha_passes,
            self.greedy_step
        )
    }
}

#[derive(Clone, Debug)]
pub struct PipelineResult<T> {
    pub plan: SparsityPlan,
    pub sparsity: ModelSparsity<T>,
    pub blocks: BlockAllocation,
    pub layers: Vec<LayerAllocation>,
    pub alphas: Vec<AlphaSearch<T>>,
}

/// Block allocation, then per-layer allocation, then exponent search, then
/// final thresholds. Each stage runs once, in that order.
pub fn run_pipeline<T: Scalar>(
    model: &ToyTransformer<T>,
    calib: &CalibrationSet,
    cache: &CalibrationCache<T>,
    config: &PipelineConfig,
) -> Result<PipelineResult<T>> {
    let clock = Instant::now();
    let blocks =
        block_level_allocation(model, cache, config.target_sparsity, &config.evo).stage("block allocation")?;
    log::info!("block allocation: loss {:.6} -> {:.6} in {:.1?}", blocks.uniform_loss, blocks.loss, clock.elapsed());
    let clock = Instant::now();
    let layers =
        allocate_layers(model, &cache.blocks, &blocks.sparsities, config.greedy_step).stage("layer allocation")?;
    log::info!("layer allocation in {:.1?}", clock.elapsed());
    let clock = Instant::now();
    let keep: Vec<LayerValues> = layers.iter().map(LayerAllocation::keep_ratios).collect();
    let alphas =
        search_alphas(model, &cache.blocks, &keep, &config.alpha_grid, config.alpha_passes).stage("alpha search")?;
    log::info!("alpha search in {:.1?}", clock.elapsed());
    let alpha_values: Vec<LayerValues> = alphas.iter().map(|a| a.alphas).collect();
    let sparsity = fix_thresholds(model, &keep, &alpha_values, &cache.blocks).stage("thresholds")?;

    let provenance = plan::Provenance {
        tool_version: report::TOOL_VERSION.to_string(),
        seed: config.evo.seed,
        evo_generations: config.evo.generations,
        evo_offspring: config.evo.offspring,
        evo_step: config.evo.step,
        evo_mutable_fraction: config.evo.mutable_fraction,
        alpha_grid: config.alpha_grid.to_string(),
        greedy_step: config.greedy_step,
        calibration_sequences: calib.sequences.len(),
        calibration_seq_len: calib.sequences.iter().map(Vec::len).max().unwrap_or(0),
        calibration: calib.manifest.clone(),
    };
    let plan = SparsityPlan::from_sparsity(config.target_sparsity, &blocks.sparsities, &sparsity, provenance)
        .stage("plan")?;
    Ok(PipelineResult { plan, sparsity, blocks, layers, alphas })
}

/// Rows of the component ablation, each adding one ingredient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationRow {
    /// Uniform keep ratio, exponent 0 (magnitude-only scores).
    ActivationOnly,
    /// Uniform keep ratio, searched exponents.
    WeightAware,
    /// Evolutionary block budgets, uniform within each block, searched exponents.
    Coarse,
    /// Block budgets refined per layer: the full pipeline.
    Fine,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] =
        [AblationRow::ActivationOnly, AblationRow::WeightAware, AblationRow::Coarse, AblationRow::Fine];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::ActivationOnly => "activation_only",
            AblationRow::WeightAware => "weight_aware",
            AblationRow::Coarse => "coarse",
            AblationRow::Fine => "fine",
        }
    }
}

/// Sparsity for every ablation row at the configured target.
pub fn ablation_sparsities<T: Scalar>(
    model: &ToyTransformer<T>,
    cache: &CalibrationCache<T>,
    config: &PipelineConfig,
) -> Result<Vec<(AblationRow, ModelSparsity<T>)>> {
    let n = model.config().n_blocks;
    let grid = &config.alpha_grid;
    let searched = |keep: &[LayerValues]| -> Result<ModelSparsity<T>> {
        let found = search_alphas(model, &cache.blocks, keep, grid, config.alpha_passes)?;
        let alphas: Vec<LayerValues> = found.iter().map(|a| a.alphas).collect();
        fix_thresholds(model, keep, &alphas, &cache.blocks)
    };

    let uniform = vec![[1.0 - config.target_sparsity; 7]; n];
    let activation_only = fix_thresholds(model, &uniform, &vec![[0.0; 7]; n], &cache.blocks).stage("activation-only")?;
    let weight_aware = searched(&uniform).stage("weight-aware")?;

    let blocks =
        block_level_allocation(model, cache, config.target_sparsity, &config.evo).stage("block allocation")?;
    let coarse_keep: Vec<LayerValues> = blocks.sparsities.iter().map(|p| [1.0 - p; 7]).collect();
    let coarse = searched(&coarse_keep).stage("coarse")?;

    let layers =
        allocate_layers(model, &cache.blocks, &blocks.sparsities, config.greedy_step).stage("layer allocation")?;
    let fine_keep: Vec<LayerValues> = layers.iter().map(LayerAllocation::keep_ratios).collect();
    let fine = searched(&fine_keep).stage("fine")?;

    Ok(vec![
        (AblationRow::ActivationOnly, activation_only),
        (AblationRow::WeightAware, weight_aware),
        (AblationRow::Coarse, coarse),
        (AblationRow::Fine, fine),
    ])
}

/// Evaluates every ablation row on held-out sequences.
pub fn run_ablation<T: Scalar>(
    model: &ToyTransformer<T>,
    cache: &CalibrationCache<T>,
    heldout: &[Vec<u32>],
    config: &PipelineConfig,
    policy: PrefillPolicy,
) -> Result<Vec<(AblationRow, EvalReport)>> {
    let rows = ablation_sparsities(model, cache, config)?;
    rows.iter()
        .map(|(row, sp)| Ok((*row, evaluate(model, Some(sp), heldout, policy).stage("ablation eval")?)))
        .collect()
}
