//! Ghost residual attention network for single-image super-resolution.
//!
//! The crate bundles a small NCHW tensor library with reverse-mode
//! differentiation, the network and its building blocks, a static cost
//! analyzer, image I/O and bicubic degradation, PSNR/SSIM evaluation and a
//! training loop.

pub mod complexity;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod imaging;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::{Checkpoint, Model, NetConfig, Variant};
pub use tensor::{Real, Tensor};
