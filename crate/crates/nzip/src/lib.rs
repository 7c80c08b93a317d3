//! Learned image compression with a hyper-prior entropy model, plus task
//! heads that classify straight from the compressed latent.
//!
//! The pipeline: an analysis transform maps an image to a latent at 1/16
//! resolution; a hyper network predicts per-element Gaussian parameters for
//! that latent; both are quantized and range-coded into a `.nzip` container.
//! Training replaces rounding with additive uniform noise so the whole
//! objective (rate + λ_d·distortion + λ_t·task loss) stays differentiable.

pub mod codec;
pub mod coder;
pub mod container;
pub mod data;
pub mod entropy;
pub mod error;
pub mod gdn;
pub mod imageio;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod task;
pub mod train;
pub mod weights;

pub use error::{NzipError, Result};
