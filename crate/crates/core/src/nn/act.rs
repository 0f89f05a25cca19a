use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RMS_EPS: f32 = 1e-6;

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// GELU, tanh approximation.
pub fn gelu_tanh(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Max-subtracted softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f32;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let d = out.last_dim();
    for row in out.data_mut().chunks_mut(d) {
        softmax_in_place(row);
    }
    out
}

/// RMS normalization over the last axis.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.len() != d {
        return Err(Error::shape(format!("rmsnorm gain {:?} for width {d}", gain.shape())));
    }
    let g = gain.data();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, gi) in row.iter_mut().zip(g) {
            *v = *v * inv * gi;
        }
    }
    Ok(out)
}

/// RMS normalization across channels at every pixel of an `[N, C, H, W]` map.
pub fn rmsnorm_channels(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape(format!("expected NCHW, got {:?}", x.shape())));
    }
    let (c, hw) = (x.dim(1), x.dim(2) * x.dim(3));
    if gain.len() != c {
        return Err(Error::shape(format!("rmsnorm gain {:?} for {c} channels", gain.shape())));
    }
    let mut out = x.clone();
    let g = gain.data();
    let data = out.data_mut();
    let mut ms = vec![0f32; hw];
    for img in data.chunks_mut(c * hw) {
        ms.iter_mut().for_each(|m| *m = 0.0);
        for plane in img.chunks(hw) {
            for (m, v) in ms.iter_mut().zip(plane) {
                *m += v * v;
            }
        }
        for m in ms.iter_mut() {
            *m = 1.0 / (*m / c as f32 + eps).sqrt();
        }
        for (ch, plane) in img.chunks_mut(hw).enumerate() {
            for (v, inv) in plane.iter_mut().zip(&ms) {
                *v = *v * inv * g[ch];
            }
        }
    }
    Ok(out)
}

/// Layer normalization over the last axis with gain and bias.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(format!("layernorm params for width {d}")));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}
