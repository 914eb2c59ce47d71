//! Frozen diffusion-backbone feature extraction and multi-timestep feature
//! fusion for dense and global probing.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, dataset IO and the command line live in the
//! companion `tapfuse` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod fusion;
pub mod heads;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod real;
pub mod taps;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;

/// Deterministic generator used for every seeded draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeded generator; equal seeds give equal streams on every platform.
pub fn rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
