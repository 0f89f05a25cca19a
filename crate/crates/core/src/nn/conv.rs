use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn dense(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            groups: channels,
            ..Self::dense(channels, channels, kernel, stride, padding)
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::dense(in_channels, out_channels, 1, 1, 0)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.stride == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::shape(format!("invalid conv spec {self:?}")));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out_size(h, self.kernel_h, self.stride, self.padding)?,
            conv_out_size(w, self.kernel_w, self.stride, self.padding)?,
        ))
    }

    /// Multiply-accumulates for one image of spatial size `h × w`.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.out_hw(h, w)?;
        Ok((oh * ow * self.out_channels * (self.in_channels / self.groups) * self.kernel_h * self.kernel_w) as u64)
    }
}

/// `floor((size + 2·pad − kernel) / stride) + 1`.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} does not fit input {size} with padding {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn check_io(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &Conv2dSpec) -> Result<(usize, usize, usize)> {
    spec.validate()?;
    if x.rank() != 4 || x.dim(1) != spec.in_channels {
        return Err(Error::shape(format!(
            "conv input {:?} for {} input channels",
            x.shape(),
            spec.in_channels
        )));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "conv weight {:?}, expected {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    if let Some(b) = b {
        if b.len() != spec.out_channels {
            return Err(Error::shape(format!("conv bias {:?}", b.shape())));
        }
    }
    let (oh, ow) = spec.out_hw(x.dim(2), x.dim(3))?;
    Ok((x.dim(0), oh, ow))
}

/// Direct grouped convolution over `[N, C, H, W]` with zero padding.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &Conv2dSpec) -> Result<Tensor> {
    let (n, oh, ow) = check_io(x, w, b, spec)?;
    let (h, wd) = (x.dim(2), x.dim(3));
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding as isize);
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0f32; n * spec.out_channels * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, o_plane)| {
        let (img, oc) = (plane / spec.out_channels, plane % spec.out_channels);
        let g = oc / cout_g;
        let bias = b.map_or(0.0, |b| b.data()[oc]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ci in 0..cin_g {
                    let c = g * cin_g + ci;
                    for ky in 0..kh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xv = xd[((img * spec.in_channels + c) * h + iy as usize) * wd + ix as usize];
                            let wv = wdat[((oc * cin_g + ci) * kh + ky) * kw + kx];
                            acc += xv * wv;
                        }
                    }
                }
                o_plane[oy * ow + ox] = acc;
            }
        }
    });
    Tensor::new(vec![n, spec.out_channels, oh, ow], out)
}

/// Per-channel convolution; `spec.groups` must equal the channel count.
pub fn depthwise_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &Conv2dSpec) -> Result<Tensor> {
    if !spec.is_depthwise() {
        return Err(Error::shape(format!("not a depthwise spec: {spec:?}")));
    }
    let (n, oh, ow) = check_io(x, w, b, spec)?;
    let (h, wd) = (x.dim(2), x.dim(3));
    let c = spec.in_channels;
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let mut out = vec![0f32; n * c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, o_plane)| {
        let ch = plane % c;
        let xin = &x.data()[plane * h * wd..(plane + 1) * h * wd];
        let k = &w.data()[ch * kh * kw..(ch + 1) * kh * kw];
        let bias = b.map_or(0.0, |b| b.data()[ch]);
        for oy in 0..oh {
            // valid kernel rows for this output row
            let y0 = oy * s;
            let ky_lo = p.saturating_sub(y0);
            let ky_hi = kh.min((h + p).saturating_sub(y0));
            for ox in 0..ow {
                let x0 = ox * s;
                let kx_lo = p.saturating_sub(x0);
                let kx_hi = kw.min((wd + p).saturating_sub(x0));
                let mut acc = bias;
                for ky in ky_lo..ky_hi {
                    let iy = y0 + ky - p;
                    let xrow = &xin[iy * wd..];
                    let krow = &k[ky * kw..];
                    for kx in kx_lo..kx_hi {
                        acc += xrow[x0 + kx - p] * krow[kx];
                    }
                }
                o_plane[oy * ow + ox] = acc;
            }
        }
    });
    Tensor::new(vec![n, c, oh, ow], out)
}

/// 1×1 convolution: a matmul over channels at every pixel. `w` is `[out, in, 1, 1]`.
pub fn pointwise_conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 4 || w.dim(2) != 1 || w.dim(3) != 1 {
        return Err(Error::shape(format!("pointwise weight {:?}", w.shape())));
    }
    let spec = Conv2dSpec::pointwise(w.dim(1), w.dim(0));
    let (n, h, wd) = check_io(x, w, b, &spec)?;
    let (cin, cout, hw) = (spec.in_channels, spec.out_channels, h * wd);
    let mut out = vec![0f32; n * cout * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(plane, o_plane)| {
        let (img, oc) = (plane / cout, plane % cout);
        o_plane.fill(b.map_or(0.0, |b| b.data()[oc]));
        let wrow = &w.data()[oc * cin..(oc + 1) * cin];
        let xin = &x.data()[img * cin * hw..(img + 1) * cin * hw];
        for (ci, &wv) in wrow.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            for (o, xv) in o_plane.iter_mut().zip(&xin[ci * hw..(ci + 1) * hw]) {
                *o += wv * xv;
            }
        }
    });
    Tensor::new(vec![n, cout, h, wd], out)
}
