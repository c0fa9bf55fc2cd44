//! Training and evaluation toolkit for binary ethical-content classification.
//!
//! The pipeline runs text normalization, WordPiece tokenization, dynamic
//! batching, a compact transformer encoder with a single-logit sigmoid head,
//! AdamW with gradient accumulation and an inverse-square-root learning-rate
//! schedule, classification metrics, and adversarial hard-split construction.
//!
//! Every numeric routine is generic over [`Scalar`] so the same code runs in
//! `f32` for training and in `f64` for finite-difference verification.

pub mod batching;
pub mod checkpoint;
pub mod dataset;
pub mod hard_filter;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod report;
pub mod run;
pub mod scalar;
pub mod synthetic;
pub mod text_normalize;
pub mod tokenizer;
pub mod trainer;

pub use scalar::Scalar;
