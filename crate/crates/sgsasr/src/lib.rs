//! Salient-region-guided arbitrary-scale super-resolution for spacecraft
//! imagery.
//!
//! The network couples a saliency-guided NAFNet-style encoder with a latent
//! modulation decoder: the encoder enhances the spacecraft core region via a
//! pluggable saliency detector, and the decoder renders pixels at any
//! real-valued scale factor by modulating a small render MLP with per-latent
//! FiLM parameters.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod npz;
pub mod saliency;
pub mod train;

pub use error::{Error, Result};

/// CLI entry point; returns the process exit code.
pub fn run_cli() -> i32 {
    cli::run(std::env::args())
}
