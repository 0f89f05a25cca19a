//! Quantized inference engine and analysis toolkit for an NPU-oriented
//! vision-language model: a MobileNet-style image encoder, a norm-free MLP
//! connector and a hybrid gated-convolution / attention decoder, with
//! calibration, mixed-precision fake quantization, memory-traffic accounting
//! and a ViT baseline for comparison.

pub mod backbone;
pub mod bundle;
pub mod calib;
pub mod connector;
pub mod data;
pub mod encoder;
pub mod experiments;
pub mod error;
pub mod init;
pub mod nn;
pub mod params;
pub mod perf;
pub mod probe;
pub mod qtensor;
pub mod report;
pub mod tensor;
pub mod vit;
pub mod vlm;

pub use error::{Error, Result};
pub use tensor::Tensor;
