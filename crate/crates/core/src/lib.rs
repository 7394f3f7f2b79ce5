//! Conditional-diffusion learned image codec with PPO-Lagrangian block-wise
//! bit allocation under a hard bitrate budget.

pub mod allocator;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod numerics;

pub use error::{Error, Result};
