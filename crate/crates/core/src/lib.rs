//! Core of the unisign stack.
//!
//! Everything here is pure computation over in-memory data and builds with
//! `#![no_std]` + `alloc`. File formats, checkpoints, the training loop and
//! the command line live in the `unisign` crate.

#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod autograd;
pub mod curation;
pub mod encoders;
pub mod error;
pub mod heads;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pgf;
pub mod pose;
pub mod sampler;
pub mod skeleton;
pub mod task;
pub mod tensor;
pub mod tokenizer;
pub mod vision;

pub use error::{Error, Result};
