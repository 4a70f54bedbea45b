//! Conditional denoising-diffusion toolkit for star-field image enhancement.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`schedule`]: the diffusion variance schedule and derived quantities
//! - [`diffusion`]: forward diffusion, reverse sampling, training loss
//! - [`corrupt`]: dynamic stochastic corruption of the condition image
//!   (Gaussian noise, Gaussian blur, cutout)
//! - [`denoiser`]: a compact conditional U-Net noise predictor with
//!   hand-rolled reverse-mode gradients
//! - [`trainer`]: Adam + cosine-annealed cascaded training
//! - [`metrics`]: PSNR / SSIM evaluation
//! - [`stargen`]: procedural semi-synthetic star-field pair generation
//! - [`dataio`]: PNG I/O, range conversion, crops, resizing, manifests
//!
//! Everything is deterministic under a seed: any function taking a random
//! source is a pure function of its inputs and that source.

pub mod checkpoint;
pub mod config;
pub mod corrupt;
pub mod dataio;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod stargen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use schedule::NoiseSchedule;
pub use tensor::{ImageTensor, Range};
