//! A compact transformer sequence-to-sequence toolkit.
//!
//! The crate covers the full desk-scale workflow: synthetic parallel data,
//! depth-configurable encoder-decoder transformers with source-factor
//! embeddings, large-batch training with inverse-square-root or
//! plateau-reduce schedules, int8 quantized CPU inference with beam search
//! and vocabulary shortlists, and the usual metrics (BLEU, perplexity,
//! latency percentiles).

pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
