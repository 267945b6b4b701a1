//! Attention-based visual grounding in a toy multimodal transformer.

pub mod encoders;
pub mod error;
pub mod grounding;
pub mod harness;
pub mod imaging;
pub mod lmm;
pub mod metrics;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod scene;
pub mod segmenter;

pub use error::{Error, Result};
