//! The layer vocabulary: convolutions, nearest-neighbor resampling,
//! instance/layer normalization, semantic denormalization, spectral
//! normalization and residual blocks.

mod blocks;
mod conv;
mod matmul;
mod norm;
mod spectral;

pub use blocks::{avg_pool2x, resize_nearest, upsample_nearest2x, BlockNorm, ResidualBlock};
pub use conv::{conv2d, Conv2d, ConvSpec};
pub use norm::{instance_norm, LayerNorm, Spade};
pub use spectral::SpectralState;
