//! End-to-end real-time shape detector trained in two stages: a dense
//! one-to-many detector first, whose backbone and neck then seed a
//! query-based one-to-one detector so only the decoder trains from scratch.
//!
//! Everything is CPU-only, deterministic under a seed, and sized for a
//! synthetic shapes dataset that trains in minutes.

pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod matching;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
