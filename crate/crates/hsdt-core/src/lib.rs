//! Hybrid spectral denoising transformer for hyperspectral images.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, computation kernels, the shared op surface,
//!   reverse-mode autodiff, and finite-difference oracles;
//! - [`param`]: named parameter storage shared by layers, optimizer, and
//!   serialization;
//! - [`blocks`]: the building blocks — hybrid spatial/spectral convolution,
//!   guided spectral self-attention, self-modulated feed-forward;
//! - [`network`]: the U-shaped model, its configuration presets, and the
//!   weight container;
//! - [`noise`]: reproducible degradation simulators with per-band logs;
//! - [`metrics`]: PSNR / SSIM / spectral-angle evaluation;
//! - [`train`]: losses, Adam, the staged learning-rate schedule, and the
//!   training loop with checkpointing;
//! - [`pnp`]: linear degradation operators and plug-and-play ADMM
//!   restoration with the trained denoiser as prior;
//! - [`gradcheck`]: the executable finite-difference verification suite.

pub mod error;
pub mod param;
pub mod rng;
pub mod tensor;

pub mod blocks;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod pnp;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Mode, Scalar, Tensor};
