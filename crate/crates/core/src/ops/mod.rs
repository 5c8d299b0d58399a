//! Differentiable primitives. Every forward op has a matching `*_backward`.

pub mod activation;
pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod pool;
pub mod resize;

pub use activation::{gelu, sigmoid, softmax};
pub use conv::{conv2d, depthwise_conv2d, transposed_conv2d, PadMode};
pub use elementwise::{add, concat_channels, mul, split_channels};
pub use norm::{batch_norm, layer_norm, Mode, RunningStats};
pub use pool::{channel_pool, global_avg_pool};
pub use resize::bilinear_upsample;
