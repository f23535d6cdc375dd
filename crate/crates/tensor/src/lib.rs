//! Deterministic dense math with reverse-mode autodiff.
//!
//! Everything is CPU-resident and generic over [`Scalar`] so the same model
//! code runs in `f32` for artifacts and in `f64` for finite-difference
//! verification. All parallelism splits disjoint output regions, keeping
//! results bitwise reproducible across runs and thread counts.

pub mod array;
pub mod kernels;
pub mod rng;
pub mod scalar;
pub mod tape;

pub use array::Array;
pub use rng::{derive_seed, RngStream};
pub use scalar::{sc, Scalar};
pub use tape::{Grads, Tape, Tensor};
