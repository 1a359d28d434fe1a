//! Storage, streaming and command-line layer over [`th2_core`].

pub mod cli;
mod error;
pub mod image_io;
pub mod pipeline;
pub mod selftest;
pub mod shard;
pub mod source;
pub mod stream;

pub use error::{Error, Result};
pub use th2_core as core;
