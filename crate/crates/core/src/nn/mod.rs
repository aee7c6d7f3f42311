//! Small neural-network toolkit on top of candle tensors.

pub mod conv;
pub mod fused;
pub mod layers;
pub mod params;

pub use fused::{add_channel_bias, glu, leaky_relu, pixel_norm, tanh, upsample2x};
pub use layers::{avg_pool2x, batch_norm, bce_with_logits, conv2d, resize_bilinear, softplus, BatchNorm, Conv2d};
pub use params::ParamStore;
