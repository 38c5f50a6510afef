//! Loss-gradient guided diffusion sampling for single-channel
//! (infrared-style) image super-resolution.
//!
//! The sampler is a DDIM reverse process whose noise prediction is
//! corrected at every step by gradients of guidance losses evaluated on
//! the current clean-image estimate. Two priors are provided: a spectral
//! one matching standardized log-magnitude Fourier spectra, and a
//! perceptual one matching features of a locked conv stack plus soft
//! segmentation masks.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod grid;
pub mod guidance;
pub mod nn;
pub mod oracle;
pub mod perceptual;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod verify;
pub mod visual;

pub use error::{Error, Result};
pub use grid::{ComplexSpectrum, ImageGrid};
pub use rng::Rng;
