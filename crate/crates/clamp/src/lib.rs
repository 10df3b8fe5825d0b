//! File formats, the training driver and the command line around
//! `clamp-core`.

pub mod bpe;
pub mod checkpoint;
pub mod cli;
pub mod clip;
pub mod coco;
pub mod config;
pub mod error;
pub mod harness;
pub mod manifest;
pub mod results;
pub mod visualize;

pub use error::{Error, Result};
