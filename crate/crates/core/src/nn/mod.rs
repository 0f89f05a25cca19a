//! Reference neural operators in the float domain, plus one true-integer
//! matmul path. Quantization is simulated around these ops by the caller.

mod act;
mod attention;
mod conv;
mod intmm;
mod linear;
mod pool;

pub use act::{gelu_tanh, gelu_scalar, layernorm, rmsnorm, rmsnorm_channels, sigmoid, silu, softmax_in_place, softmax_rows, DEFAULT_RMS_EPS};
pub use attention::{attend, attention, attention_probs, AttentionSpec, Mask};
pub use conv::{conv2d_direct, conv_out_size, depthwise_conv2d, pointwise_conv2d, Conv2dSpec};
pub use intmm::{int_matmul_i32, IntMatmul};
pub use linear::{dot, linear, swiglu_ffn, Linear};
pub use pool::{avg_pool2d, upsample_nearest};
