//! Neural building blocks recorded on a [`Tape`](crate::tensor::Tape).

mod activation;
mod conv;
mod linear;
mod norm;
mod resize;
mod window;

pub use activation::{gelu_op as gelu, relu, sigmoid_op as sigmoid, softmax};
pub use conv::{conv2d, separable_conv, ConvGeometry};
pub use linear::{add_channel_bias, linear};
pub use norm::{batch_norm, layer_norm, Mode, RunningStats, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use resize::bilinear_resize;
pub use window::{window_merge, window_partition};
