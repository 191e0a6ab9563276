//! Hierarchical language-model piano transcription.
//!
//! A roll-based encoder turns a segment's features into hidden states `H`;
//! three decoder-only language models then predict onset and pitch, velocity,
//! and offset in turn, each conditioned on `H` and on the tokens fixed by the
//! previous stages. A single flattened-sequence model and the threshold-based
//! roll readout are provided as baselines, together with note-level
//! evaluation.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod roll;
pub mod types;

pub use candle_core::DType;
pub use error::{Error, Result};
