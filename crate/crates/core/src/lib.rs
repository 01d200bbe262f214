//! Causal representation learning for debiasing reward models.
//!
//! The crate is `no_std` with `alloc`. Enable the `std` feature for runtime
//! CPU-feature detection in the matrix kernels.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod cvae;
pub mod error;
pub mod flows;
pub mod kernels;
pub mod math;
pub mod multilabeler;
pub mod nn;
pub mod reward;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
