//! File formats, training orchestration and the command line around
//! `unisign-core`.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod manifest;
pub mod synth;
pub mod train;

pub use error::{Result, RunError};
