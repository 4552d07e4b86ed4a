//! Build, calibrate, contextually prune, fine-tune and evaluate small
//! GPT-style decoders.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`). Checkpoints,
//! the CLI and the pipeline use `f32`; the aliases below name those
//! instantiations.
//!
//! Pipeline:
//! 1. [`calibration::collect_stats`] runs a domain dataset through the model and
//!    records the mean absolute activation of every neuron at every site.
//! 2. [`pruning::PrunePlan::build`] marks MLP hidden units whose statistic falls
//!    below a threshold and tokens that never occur, then
//!    [`pruning::apply_plan`] physically removes them.
//! 3. [`training::train`] fine-tunes until perplexity is back to the unpruned
//!    baseline.
//! 4. [`eval`] measures perplexity and multiple-choice accuracy.

pub mod calibration;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the storage type of checkpoints.
pub type Tensor = tensor::Tensor<f32>;
/// Single-precision model bundle.
pub type Model = model::ModelBundle<f32>;
/// Double-precision model bundle, used for gradient verification.
pub type Model64 = model::ModelBundle<f64>;
pub type Tape = tensor::Tape<f32>;
