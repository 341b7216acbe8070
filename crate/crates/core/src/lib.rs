//! Facial part swapping with mask-based feature fusion and addition-based
//! condition injection into a small latent denoising UNet.

pub mod codec;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod encoder;
pub mod fusion;
pub mod injection;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod unet;
pub mod tensor;
pub mod train;

pub use error::{Error, ExitCode, Result};
