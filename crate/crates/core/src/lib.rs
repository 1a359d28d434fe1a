//! Allocation-only core of the `th2` toolkit.
//!
//! Everything in this crate is pure computation over owned buffers: no IO,
//! no threads, no clocks. The `th2` crate layers file formats, sharded data
//! streaming and the command-line interface on top.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod coords;
pub mod crop;
mod error;
pub mod gradcheck;
pub mod image;
pub mod mix;
pub mod nn;
pub mod packing;
pub mod planner;
pub mod resampler;
pub mod rng;
pub mod spe;
pub mod tensor;

pub use error::{Error, Result};
pub use image::Image;
pub use rng::SplitMix64;
pub use tensor::{Tape, Tensor, Var};
