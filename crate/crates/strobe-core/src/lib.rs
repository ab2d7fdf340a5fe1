//! Memory-efficient multi-level video GAN.
//!
//! A stack of sub-generators renders a video at several resolutions; during
//! training, frame-subsampling layers between the stages let each level train
//! on sparse frame subsets (full-length clips only at the cheapest level),
//! while inference runs the same weights densely. Per-level discriminators
//! are aggregated into a single adversarial objective with a zero-centered
//! gradient penalty on real inputs.

pub mod checkpoint;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod subsample;
pub mod training;
pub mod types;

pub use error::{Error, Result};
