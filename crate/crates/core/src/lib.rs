//! Miniature neural machine translation framework.
//!
//! The crate is organized around the same five ingredients a full-scale
//! sequence-to-sequence stack needs, shrunk to desk scale:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode differentiation on a tape
//! - [`data`]: synthetic translation problems, byte-pair subword vocabularies,
//!   binary record files, and a bucketed batching pipeline
//! - [`model`]: the transformer encoder-decoder
//! - [`training`]: Adam, learning-rate schedule, checkpointing and averaging,
//!   synchronous replicas, seeding, and the regression harness
//! - [`decoding`]: greedy and beam search with length penalty, plus corpus BLEU
//! - [`bench`]: instrumented forward passes measuring per-layer cost,
//!   sequential stages, and dependency path lengths
//!
//! Everything is deterministic given a seed: single-replica training twice
//! with the same configuration writes bit-identical metrics.

#![forbid(unsafe_code)]

pub mod bench;
pub mod data;
pub mod decoding;
pub mod error;
pub mod model;
pub mod registry;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tensor, Tape};

/// Reserved token ids shared by every vocabulary.
pub const PAD_ID: u32 = 0;
/// End-of-sequence marker; also the decoder start symbol.
pub const EOS_ID: u32 = 1;
/// Unknown-symbol id; absorbs characters outside the training charset.
pub const UNK_ID: u32 = 2;
