//! Image I/O, block partitioning and the high-pass residual features.

mod blocks;
mod plane;
mod ppm;
mod residual;
pub mod synthetic;

pub use blocks::{partition, Block, BlockGrid, Partition, DEFAULT_BLOCK_SIZE};
pub use plane::ImagePlane;
pub use ppm::write_atomic;
pub use ppm::{decode_ppm, encode_ppm, load_image, save_image};
pub use residual::{block_stats, highpass, ResidualMap, ACTIVITY_THRESHOLD};
