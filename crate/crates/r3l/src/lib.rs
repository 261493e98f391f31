//! Training, inference and evaluation plumbing around `r3l-core`: PGM files,
//! checkpoints, the training loop, the noise-mismatch sweep and the CLI
//! configuration.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pgm;
pub mod store;
pub mod sweep;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
