//! Synthetic-anomaly noise generation, diffusion scheduling, a small
//! denoising U-Net with hand-written gradients, and multi-stage inference for
//! unsupervised anomaly segmentation.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod imgrid;
pub mod inference;
pub mod kv;
pub mod metrics;
pub mod noisegen;
pub mod phantom;
pub mod rng;
pub mod runtime;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
pub use imgrid::{BinaryMask, Image2D};
pub use rng::RngState;
