//! Activation sparsity for small decoder-only transformers.
//!
//! Each projection input channel is scored by its magnitude times a power of
//! the matching weight column norm, and channels under a calibrated
//! per-layer threshold are skipped at inference. Sparsity is distributed
//! across blocks by an evolutionary search and across the projections of a
//! block greedily; the weight exponents are tuned per block on a grid.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the storage type to `f32`.

pub mod allocate;
pub mod calibrate;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod kernels;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod scoring;

pub use error::{Error, Result};
pub use numerics::{Matrix, Scalar};

pub type Matrix32 = numerics::Matrix<f32>;
pub type ToyTransformer32 = model::ToyTransformer<f32>;
pub type SparsityState32 = scoring::SparsityState<f32>;
pub type ModelSparsity32 = scoring::ModelSparsity<f32>;
pub type CalibrationCache32 = data::CalibrationCache<f32>;
