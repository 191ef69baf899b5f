//! Semi-autoregressive Transformer (SAT) for sequence-to-sequence generation.
//!
//! The SAT keeps the autoregressive property across groups of `K` consecutive
//! target tokens but generates the tokens inside a group in parallel, so one
//! decoder invocation emits `K` tokens. `K = 1` recovers the standard
//! autoregressive Transformer; `K >=` target length recovers a fully
//! non-autoregressive model.
//!
//! The crate contains everything needed to train, decode, and benchmark the
//! model at desk scale:
//!
//! - [`masks`]: group partitioning, strict/relaxed causal masks, target shift
//! - [`tensor`]: dense matrices with reverse-mode autodiff and Adam
//! - [`model`]: the encoder-decoder network and its parameters
//! - [`decode`]: group-parallel greedy/beam search and latency measurement
//! - [`train`]: training loop, lr schedule, checkpoint averaging, distillation
//! - [`data`]: corpora, vocabularies, token batching, checkpoint files
//! - [`eval`]: BLEU, position-wise cross-entropy, speed/quality reports
//! - [`toy`]: seeded synthetic copy/reverse corpora for self-contained runs

pub mod data;
pub mod error;
pub mod masks;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
