//! Zero-shot sketch-image hashing: a small reverse-mode autodiff engine, the
//! ZSIH layers and objective, a training pipeline, and Hamming retrieval.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod layers;
pub mod objective;
pub mod pipeline;
pub mod retrieval;

pub use error::{Error, Result};
