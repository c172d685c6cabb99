//! Segment-level recurrent transformer language models.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors and a tape-based reverse-mode AD engine
//! - [`relattn`]: sinusoid distance tables and relative/absolute attention
//! - [`model`]: the layer stack, memory state and checkpoints
//! - [`corpus`]: vocabularies, splits and the contiguous segment batcher
//! - [`trainer`]: Adam training with carried memory
//! - [`evaluator`]: memory-reuse and sliding-window evaluation, speed benches
//! - [`recl`]: relative effective context length over loss tables
//! - [`sampler`]: top-k generation with memory carry

pub mod error;
pub mod numerics;
pub mod relattn;
pub mod model;
pub mod corpus;
pub mod trainer;
pub mod evaluator;
pub mod recl;
pub mod sampler;

pub use error::{Error, Result};
