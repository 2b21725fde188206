//! A small pre-norm decoder-only transformer (causal attention + SwiGLU MLP)
//! whose seven projections per block can run sparsified.

mod forward;
mod io;
pub mod tokenizer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::PackedWeight;
use crate::numerics::{column_l2_norms, Matrix, Scalar};

pub use forward::{
    block_forward, model_forward, BlockActivations, DecodeSession, ForwardTrace, KvCache, Stage,
};
pub(crate) use forward::{run_block, run_blocks, ProjMode};
pub use io::{config_path, load_model, save_model};

/// Projection sites of a block, in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] =
        [LayerKind::Q, LayerKind::K, LayerKind::V, LayerKind::O, LayerKind::Gate, LayerKind::Up, LayerKind::Down];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Q => "q_proj",
            LayerKind::K => "k_proj",
            LayerKind::V => "v_proj",
            LayerKind::O => "o_proj",
            LayerKind::Gate => "gate_proj",
            LayerKind::Up => "up_proj",
            LayerKind::Down => "down_proj",
        }
    }

    pub fn from_name(name: &str) -> Option<LayerKind> {
        LayerKind::ALL.into_iter().find(|k| k.name() == name)
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_attention(self) -> bool {
        matches!(self, LayerKind::Q | LayerKind::K | LayerKind::V | LayerKind::O)
    }

    /// Forward stage that consumes this projection's output.
    pub fn stage(self) -> Stage {
        match self {
            LayerKind::Q | LayerKind::K | LayerKind::V => Stage::Attention,
            LayerKind::O => Stage::Output,
            LayerKind::Gate | LayerKind::Up => Stage::Mlp,
            LayerKind::Down => Stage::Down,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_blocks: 8, d_model: 128, n_heads: 4, d_ff: 344, vocab_size: 256, max_seq: 256, rms_eps: 1e-5 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::invalid("vocab_size and max_seq must be positive"));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::invalid("rms_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(out, in)` shape of a projection.
    pub fn layer_shape(&self, kind: LayerKind) -> (usize, usize) {
        match kind {
            LayerKind::Q | LayerKind::K | LayerKind::V | LayerKind::O => (self.d_model, self.d_model),
            LayerKind::Gate | LayerKind::Up => (self.d_ff, self.d_model),
            LayerKind::Down => (self.d_model, self.d_ff),
        }
    }

    pub fn input_widths(&self) -> [usize; 7] {
        LayerKind::ALL.map(|k| self.layer_shape(k).1)
    }

    /// Projection parameters per layer, in [`LayerKind::ALL`] order.
    pub fn layer_params(&self) -> [usize; 7] {
        LayerKind::ALL.map(|k| {
            let (o, i) = self.layer_shape(k);
            o * i
        })
    }

    pub fn block_params(&self) -> usize {
        self.layer_params().iter().sum()
    }
}

/// A projection weight with its channel-major copy and column norms.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    weight: Matrix<T>,
    packed: PackedWeight<T>,
    col_norms: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Matrix<T>) -> Self {
        let packed = PackedWeight::from_matrix(&weight);
        let col_norms = column_l2_norms(&weight);
        Linear { weight, packed, col_norms }
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }

    pub fn packed(&self) -> &PackedWeight<T> {
        &self.packed
    }

    pub fn col_norms(&self) -> &[T] {
        &self.col_norms
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub(crate) attn_norm: Vec<T>,
    pub(crate) mlp_norm: Vec<T>,
    pub(crate) layers: Vec<Linear<T>>,
}

impl<T: Scalar> Block<T> {
    pub fn new(attn_norm: Vec<T>, mlp_norm: Vec<T>, weights: Vec<Matrix<T>>) -> Result<Self> {
        if weights.len() != LayerKind::ALL.len() {
            return Err(Error::invalid(format!("block needs 7 projections, got {}", weights.len())));
        }
        Ok(Block { attn_norm, mlp_norm, layers: weights.into_iter().map(Linear::new).collect() })
    }

    pub fn layer(&self, kind: LayerKind) -> &Linear<T> {
        &self.layers[kind.index()]
    }

    pub fn attn_norm(&self) -> &[T] {
        &self.attn_norm
    }

    pub fn mlp_norm(&self) -> &[T] {
        &self.mlp_norm
    }

    /// Rewrites projection weights in place and refreshes derived data.
    pub fn map_weights(&mut self, mut f: impl FnMut(LayerKind, &mut Matrix<T>)) {
        for kind in LayerKind::ALL {
            let mut w = self.layers[kind.index()].weight.clone();
            f(kind, &mut w);
            self.layers[kind.index()] = Linear::new(w);
        }
    }

    fn check(&self, cfg: &ModelConfig, b: usize) -> Result<()> {
        for kind in LayerKind::ALL {
            let (o, i) = cfg.layer_shape(kind);
            let w = &self.layer(kind).weight;
            if w.rows() != o || w.cols() != i {
                return Err(Error::tensor(
                    format!("blocks.{b}.{}", kind.name()),
                    format!("shape {}x{} != expected {o}x{i}", w.rows(), w.cols()),
                ));
            }
        }
        for (name, v) in [("attn_norm", &self.attn_norm), ("mlp_norm", &self.mlp_norm)] {
            if v.len() != cfg.d_model {
                return Err(Error::tensor(format!("blocks.{b}.{name}"), format!("length {} != {}", v.len(), cfg.d_model)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTransformer<T> {
    pub(crate) config: ModelConfig,
    pub(crate) embed: Matrix<T>,
    pub(crate) blocks: Vec<Block<T>>,
    pub(crate) final_norm: Vec<T>,
    pub(crate) lm_head: Linear<T>,
}

impl<T: Scalar> ToyTransformer<T> {
    pub fn new(
        config: ModelConfig,
        embed: Matrix<T>,
        blocks: Vec<Block<T>>,
        final_norm: Vec<T>,
        lm_head: Matrix<T>,
    ) -> Result<Self> {
        config.validate()?;
        if embed.rows() != config.vocab_size || embed.cols() != config.d_model {
            return Err(Error::tensor("embed", "shape disagrees with config"));
        }
        if blocks.len() != config.n_blocks {
            return Err(Error::invalid(format!("{} blocks, config says {}", blocks.len(), config.n_blocks)));
        }
        for (b, block) in blocks.iter().enumerate() {
            block.check(&config, b)?;
        }
        if final_norm.len() != config.d_model {
            return Err(Error::tensor("final_norm", "length disagrees with config"));
        }
        if lm_head.rows() != config.vocab_size || lm_head.cols() != config.d_model {
            return Err(Error::tensor("lm_head", "shape disagrees with config"));
        }
        Ok(ToyTransformer { config, embed, blocks, final_norm, lm_head: Linear::new(lm_head) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn block(&self, b: usize) -> &Block<T> {
        &self.blocks[b]
    }

    pub fn block_mut(&mut self, b: usize) -> &mut Block<T> {
        &mut self.blocks[b]
    }

    pub fn embedding(&self) -> &Matrix<T> {
        &self.embed
    }

    pub fn final_norm(&self) -> &[T] {
        &self.final_norm
    }

    pub fn lm_head(&self) -> &Linear<T> {
        &self.lm_head
    }

    /// Parameter counts of every block's projections.
    pub fn block_weights(&self) -> Vec<f64> {
        vec![self.config.block_params() as f64; self.config.n_blocks]
    }
}

/// Deterministic random weights with heterogeneous column scales.
///
/// Every projection column gets a scale drawn log-uniformly from [0.25, 4],
/// so some low-activation channels sit on high-norm columns.
pub fn init_toy_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ToyTransformer<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng, scale: f64| T::from_acc(rng.sample::<f64, _>(StandardNormal) * scale);

    let embed_data = (0..config.vocab_size * config.d_model).map(|_| normal(&mut rng, 1.0)).collect();
    let embed = Matrix::from_vec(config.vocab_size, config.d_model, embed_data)?;

    let (lo, hi) = (0.25f64.ln(), 4.0f64.ln());
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for _ in 0..config.n_blocks {
        let mut weights = Vec::with_capacity(7);
        for kind in LayerKind::ALL {
            let (rows, cols) = config.layer_shape(kind);
            let col_scale: Vec<f64> = (0..cols).map(|_| rng.random_range(lo..hi).exp()).collect();
            let std = 1.0 / (cols as f64).sqrt();
            let mut w = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for (c, s) in col_scale.iter().enumerate() {
                    w.set(r, c, normal(&mut rng, std * s));
                }
            }
            weights.push(w);
        }
        blocks.push(Block::new(vec![T::one(); config.d_model], vec![T::one(); config.d_model], weights)?);
    }

    let head_std = 1.0 / (config.d_model as f64).sqrt();
    let head_data = (0..config.vocab_size * config.d_model).map(|_| normal(&mut rng, head_std)).collect();
    let lm_head = Matrix::from_vec(config.vocab_size, config.d_model, head_data)?;
    ToyTransformer::new(config.clone(), embed, blocks, vec![T::one(); config.d_model], lm_head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { n_blocks: 2, d_model: 16, n_heads: 2, d_ff: 24, vocab_size: 256, max_seq: 32, rms_eps: 1e-5 }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_toy_model::<f32>(&tiny(), 3).unwrap();
        let b = init_toy_model::<f32>(&tiny(), 3).unwrap();
        let c = init_toy_model::<f32>(&tiny(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn column_norm_spread() {
        let m = init_toy_model::<f32>(&ModelConfig::default(), 0).unwrap();
        for block in m.blocks() {
            for kind in LayerKind::ALL {
                let n = block.layer(kind).col_norms();
                let max = n.iter().cloned().fold(f32::MIN, f32::max);
                let min = n.iter().cloned().fold(f32::MAX, f32::min);
                assert!(max / min >= 4.0, "{}: {}", kind.name(), max / min);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        cfg = tiny();
        cfg.n_blocks = 0;
        assert!(init_toy_model::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn layer_names_round_trip() {
        for k in LayerKind::ALL {
            assert_eq!(LayerKind::from_name(k.name()), Some(k));
        }
        assert_eq!(LayerKind::from_name("lm_head"), None);
    }
}
