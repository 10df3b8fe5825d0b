//! Cross-modal animal pose estimation.
//!
//! Pose-specific text prompts (learnable prefix tokens followed by a keypoint
//! name) are embedded by a frozen text encoder, refined against the image, and
//! adapted to visual keypoints through two contrastive objectives: a spatial
//! one that supervises cosine presence-score maps with Gaussian heatmaps, and
//! a feature one that matches grid-sampled keypoint features against the
//! prompts. The score maps are concatenated with the backbone features and
//! decoded by a deconvolution head into keypoint heatmaps.
//!
//! The crate is `no_std` (with `alloc`) when the default `std` feature is
//! disabled. File formats, the command line and the training driver live in
//! the companion `clamp` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapt;
pub mod augment;
pub mod checks;
pub mod error;
pub mod eval;
pub mod graph;
pub mod heatmap;
pub mod math;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod schema;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
