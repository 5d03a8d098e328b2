//! Spoken term discovery from transformer self-attention maps.

pub mod alignment;
pub mod clustering;
pub mod error;
pub mod lexicon_metrics;
pub mod par;
pub mod pipeline;
pub mod seg_metrics;
pub mod segmenter;
pub mod stats;
pub mod sweep;
pub mod synth;
pub mod tensor_store;
pub mod time;

pub use error::{Error, Result};
