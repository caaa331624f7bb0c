//! Block-wise Wasserstein-GAN synthesis of singing-voice vocoder features.
//!
//! A conditioning stack (phoneme one-hot, log-f0, singer one-hot, noise) is
//! mapped to 64-channel feature blocks by a 1-D U-Net generator trained
//! against a weight-clipped critic plus a reconstruction term. Full tracks are
//! synthesised by overlap-adding half-overlapping blocks with a triangular
//! window, and scored with mel-cepstral distortion.

pub mod checkpoint;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
