//! Masked discrete diffusion over part-wise sign tokens.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic motion/text
//! corpus, per-part k-means codebooks, the forward masking and reverse
//! unmasking processes, checkpointed unmasking schedules with exact order
//! counts, a small bidirectional mask predictor (plus a causal baseline)
//! trained with token, latent and physical-space objectives, and the
//! token-BLEU / DTW evaluation metrics.
//!
//! Batch-level work (per-sequence gradients, evaluation sweeps, Monte Carlo
//! statistics) goes through [`exec::Exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod generate;
pub mod metrics;
pub mod model;
pub mod mop;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod seq;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use seq::{MaskMode, MaskState, Part, Position, Predictions, TokenSequence, VocabSpec};
