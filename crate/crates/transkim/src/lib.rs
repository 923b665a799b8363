#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons double as NaN guards

//! Transformer encoder engine with learned per-layer token skimming.
//!
//! Each encoder layer is preceded by a small predictor that decides, per
//! token, whether the layer still needs it. Skimmed tokens are removed from
//! all later layers and their last hidden state is forwarded straight to the
//! encoder output, so token-level heads still see a full-length sequence.
//! Training keeps full-length tensors and masks attention instead of pruning,
//! which makes masked training and gathered inference numerically
//! interchangeable; a FLOPs engine reports the resulting speedups under the
//! usual padding conventions.

pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod model;
pub mod report;
pub mod runtime;
pub mod scalar;
pub mod skim;
pub mod tasks;
pub mod tensor;
pub mod trace;
pub mod train;

pub use config::{AttentionMaskMode, ForceKeep, ModelConfig, PadPolicy, RunConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor};
