//! Single-step latent-consistency super-resolution at desk scale.
//!
//! The pipeline has two trained stages plus a sampler:
//!
//! 1. A residual autoencoder compresses the difference information
//!    between an HR image and its upsampled LR counterpart into a small
//!    latent code; the decoder combines that code with the LR image
//!    through a dedicated SR branch ([`rae_stage`], [`backbone`]).
//! 2. A consistency model learns to map any noisy latent (conditioned on
//!    LR features) straight to the clean residual latent, so inference
//!    needs a single denoiser evaluation ([`lcd_stage`], [`schedule`]).
//!
//! [`sampler`] performs single-step generation (plus an iterative
//! ancestral baseline for runtime comparisons), [`datapipe`] handles
//! bicubic degradation and dataset assembly, and [`eval`] provides PSNR,
//! a perceptual-metric plugin interface, and the timing harness.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod eval;
pub mod lcd_stage;
pub mod optim;
pub mod params;
pub mod rae_stage;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use params::ParameterSet;
