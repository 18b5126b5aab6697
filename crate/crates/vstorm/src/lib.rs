//! Variational manifold learning from undersampled measurements.
//!
//! Learns a generative decoder plus per-frame Gaussian variational latents
//! directly from undersampled linear measurements, and applies it to the
//! joint alignment and recovery of multislice dynamic image series.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fft;
pub mod generator;
pub mod grid;
pub mod latent;
pub mod measurement;
pub mod pipeline;
pub mod rng;
pub mod trainer;
