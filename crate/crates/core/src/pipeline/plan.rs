//! The plan file: everything needed to rebuild a sparse model from the
//! dense weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ManifestEntry;
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::model::{LayerKind, ModelConfig, ToyTransformer};
use crate::numerics::Scalar;
use crate::scoring::{ModelSparsity, SparsityState};

pub const PLAN_FORMAT: &str = "actsparse-plan/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub format: String,
    pub target_sparsity: f64,
    pub provenance: Provenance,
    pub blocks: Vec<BlockPlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    pub evo_generations: usize,
    pub evo_offspring: usize,
    pub evo_step: f64,
    pub evo_mutable_fraction: f64,
    pub alpha_grid: String,
    pub greedy_step: f64,
    pub calibration_sequences: usize,
    pub calibration_seq_len: usize,
    pub calibration: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub index: usize,
    pub sparsity: f64,
    pub layers: Vec<LayerPlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub sparsity: f64,
    pub alpha: f64,
    /// Channels scoring below this are skipped; `-inf` keeps everything.
    pub threshold: f64,
    /// Number of calibration scores the threshold was taken from.
    pub pool_size: usize,
}

impl SparsityPlan {
    /// Builds a plan from calibrated states; layer sparsity is `1 - keep`.
    pub fn from_sparsity<T: Scalar>(
        target_sparsity: f64,
        block_sparsity: &[f64],
        sparsity: &ModelSparsity<T>,
        provenance: Provenance,
    ) -> Result<Self> {
        crate::error::ensure_len(sparsity.blocks.len(), block_sparsity.len())?;
        let blocks = sparsity
            .blocks
            .iter()
            .enumerate()
            .map(|(index, states)| {
                let states = states
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("block {index} has no sparsity states")))?;
                let layers = LayerKind::ALL
                    .iter()
                    .zip(states)
                    .map(|(k, s)| LayerPlan {
                        name: k.name().to_string(),
                        sparsity: 1.0 - s.keep_ratio(),
                        alpha: s.alpha(),
                        threshold: s.threshold().to_acc(),
                        pool_size: s.pool_size(),
                    })
                    .collect();
                Ok(BlockPlan { index, sparsity: block_sparsity[index], layers })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SparsityPlan { format: PLAN_FORMAT.to_string(), target_sparsity, provenance, blocks })
    }

    /// Parameter-weighted mean of the layer sparsities.
    pub fn weighted_sparsity(&self, cfg: &ModelConfig) -> f64 {
        let params = cfg.layer_params();
        let mut num = 0.0;
        let mut den = 0.0;
        for block in &self.blocks {
            for layer in &block.layers {
                if let Some(kind) = LayerKind::from_name(&layer.name) {
                    num += layer.sparsity * params[kind.index()] as f64;
                    den += params[kind.index()] as f64;
                }
            }
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    /// Checks that every (block, layer) of the model appears exactly once
    /// with sane values.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let bad = |reason: String| Error::format("plan", reason);
        if self.format != PLAN_FORMAT {
            return Err(bad(format!("unknown format `{}`", self.format)));
        }
        if self.blocks.len() != cfg.n_blocks {
            return Err(bad(format!("{} blocks, model has {}", self.blocks.len(), cfg.n_blocks)));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.index != b {
                return Err(bad(format!("block entry {b} has index {}", block.index)));
            }
            let mut seen = [false; 7];
            for layer in &block.layers {
                let kind = LayerKind::from_name(&layer.name)
                    .ok_or_else(|| bad(format!("block {b}: unknown layer `{}`", layer.name)))?;
                if std::mem::replace(&mut seen[kind.index()], true) {
                    return Err(bad(format!("block {b}: layer {} listed twice", layer.name)));
                }
                if !(0.0..=1.0).contains(&layer.sparsity) || !(layer.alpha >= 0.0) || layer.threshold.is_nan() {
                    return Err(bad(format!("block {b} {}: value out of range", layer.name)));
                }
            }
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(Error::MissingLayerState { block: b, layer: LayerKind::ALL[i].name().to_string() });
            }
        }
        Ok(())
    }

    /// Sparsity states for `model` as recorded in the plan.
    pub fn to_sparsity<T: Scalar>(&self, model: &ToyTransformer<T>) -> Result<ModelSparsity<T>> {
        self.validate(model.config())?;
        let blocks = self
            .blocks
            .iter()
            .map(|block| {
                let mut states: Vec<Option<SparsityState<T>>> = vec![None; 7];
                for layer in &block.layers {
                    let kind = LayerKind::from_name(&layer.name).expect("validated");
                    let norms = model.block(block.index).layer(kind).col_norms();
                    states[kind.index()] = Some(SparsityState::with_threshold(
                        norms,
                        layer.alpha,
                        1.0 - layer.sparsity,
                        T::from_acc(layer.threshold),
                        layer.pool_size,
                    )?);
                }
                Ok(Some(states.into_iter().map(|s| s.expect("validated")).collect()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelSparsity { blocks })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("plan", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("plan", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_toml()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
