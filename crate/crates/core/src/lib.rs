//! Sparse Mixture-of-Experts text embedding pipeline.
//!
//! The crate covers the full loop for training and evaluating a small MoE
//! biencoder on a single machine:
//!
//! - [`numeric`]: f64 tensors with tape-based reverse-mode differentiation
//! - [`encoder`]: RoPE transformer biencoder with dense or MoE MLP sublayers
//! - [`moe`]: top-k token-choice routing, load-balance loss, dense→MoE upcycling
//! - [`objectives`]: InfoNCE, hard-negative and Matryoshka variants, MLM masking
//! - [`datapipe`]: pair corpora, consistency filtering, hard-negative mining,
//!   one-dataset-per-batch sampling
//! - [`eval`]: brute-force dense retrieval and nDCG@10
//! - [`trainer`]: AdamW training loop for all three stages, checkpointing
//! - [`ablate`]: dense-vs-MoE and mining-margin sweeps on synthetic corpora

pub mod ablate;
pub mod datapipe;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod moe;
pub mod numeric;
pub mod objectives;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
