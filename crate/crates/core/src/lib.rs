//! Residual-recovery image denoising with a pixel-wise actor-critic (R3L) and its
//! supervised recurrent twin (R3N).
//!
//! This crate is `no_std` + `alloc`. The `std` feature (on by default) only turns
//! on runtime CPU feature detection in the matrix kernels.

#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod env;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod inference;
pub mod metrics;
pub mod networks;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
