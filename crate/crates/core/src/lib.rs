//! Lab-of-origin attribution for engineered plasmid DNA.
//!
//! The pipeline ingests plasmid records (sequence + 39 binary phenotype
//! flags), tokenizes sequences with a byte-pair-encoding vocabulary, and
//! trains a multi-kernel 1-D convolutional encoder under either a softmax
//! classifier or a triplet-network metric-learning objective with hard
//! negative mining. Trained models rank candidate labs by cosine similarity
//! between sequence and lab embeddings, support few-shot attribution from
//! stored exemplars, and expose gradient-based token importance for
//! inspecting what drives a prediction.
//!
//! Modules:
//! - [`tensor`] — minimal dense-tensor engine with reverse-mode autodiff
//! - [`data`] — record parsing, validation, metadata encoding
//! - [`bpe`] — byte pair encoding over the `{A,C,G,T,N}` alphabet
//! - [`split`] — Levenshtein grouping and leak-free train/validation splits
//! - [`model`] — the attribution network and checkpoint format
//! - [`train`] — augmentation, losses, mining, Adam, one-cycle schedule
//! - [`eval`] — cosine ranking, top-k accuracy, few-shot, mutation sweeps
//! - [`interpret`] — token importance, lab comparison, k-means clustering

pub mod bpe;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod interpret;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod split;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
