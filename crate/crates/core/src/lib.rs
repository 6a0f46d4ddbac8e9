//! Streaming simultaneous speech-to-text translation at desk scale.
//!
//! The pipeline mirrors a production simultaneous translator: a chunkwise
//! causal speech encoder with a sliding key/value window, a 4x downsampling
//! adapter into the decoder embedding space, and a multi-turn decoder that
//! alternates speech turns with translation turns, signalling with a reserved
//! read token when it needs more audio. Training data is synthesized from
//! word alignments as chunk-level trajectories; latency is evaluated with
//! stream-level length-adaptive average lagging.

pub mod attention;
pub mod encoder;
pub mod data;
pub mod config;
pub mod decoder;
pub mod error;
pub mod generation;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod streaming;
pub mod tensor;
pub mod toy;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
