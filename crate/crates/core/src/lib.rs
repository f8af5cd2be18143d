//! Distant supervision for procedural step recognition.
//!
//! Narrated video segments are pseudo-labeled with knowledge-base steps by
//! matching ASR sentences to step descriptions in a sentence-embedding space.
//! The resulting step distributions train a segment-level model, whose
//! features then feed a single-layer transformer for task classification and
//! next-step forecasting.

pub mod assignment;
pub mod checkpoint;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod longterm;
pub mod math;
pub mod optim;
pub mod segment_model;

pub use error::{Error, Result};
