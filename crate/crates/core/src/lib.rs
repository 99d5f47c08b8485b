//! Self- and semi-supervised domain adaptation for streaming transducer ASR,
//! at desk scale on a synthetic corpus.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, a reverse-mode tape, Adam, checkpoints.
//! - [`synthgen`]: a synthetic two-domain corpus with source/target splits.
//! - [`encoder`]: a causal (or limited-lookahead) conformer encoder.
//! - [`transducer`]: prediction/joint networks, lattice loss, decoding.
//! - [`selfsup`]: wav2vec, wav2vec 2.0 and APC objectives and the joint loss.
//! - [`confidence`]: the confidence estimation module and utterance filter.
//! - [`eval`]: WER with a deterministic alignment.
//! - [`pipeline`]: training recipes, noisy-student pseudo-labeling and
//!   experiment presets.

pub mod confidence;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod synthgen;
pub mod model;
pub mod pipeline;
pub mod selfsup;
pub mod tensor;
pub mod transducer;

pub use error::{Error, Result};
