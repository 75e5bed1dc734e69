//! Self-supervised image denoising from single noisy images with push-pull
//! regularization.

pub mod degrade;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod noise;
pub mod rng;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
