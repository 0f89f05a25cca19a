use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over `kernel × kernel` windows of an `[N, C, H, W]` map, no padding.
/// The window grid must tile the input exactly.
pub fn avg_pool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    if x.rank() != 4 || kernel == 0 || stride == 0 {
        return Err(Error::shape(format!("avg_pool2d on {:?} k={kernel} s={stride}", x.shape())));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if h < kernel || w < kernel || (h - kernel) % stride != 0 || (w - kernel) % stride != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} map is not tiled by kernel {kernel} stride {stride}"
        )));
    }
    let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let inv = 1.0 / (kernel * kernel) as f32;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0f32;
                for ky in 0..kernel {
                    let row = &plane[(oy * stride + ky) * w + ox * stride..];
                    acc += row[..kernel].iter().sum::<f32>();
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Nearest-neighbour upsampling: every pixel becomes a `factor × factor` block.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if x.rank() != 4 || factor == 0 {
        return Err(Error::shape(format!("upsample {:?} by {factor}", x.shape())));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for oy in 0..oh {
            let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_examples() {
        let c = Tensor::full(&[1, 2, 6, 6], 1.25);
        assert_eq!(avg_pool2d(&c, 3, 3).unwrap(), Tensor::full(&[1, 2, 2, 2], 1.25));

        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        assert_eq!(avg_pool2d(&x, 3, 3).unwrap().data(), &[5.0]);

        let big = Tensor::zeros(&[1, 1, 48, 48]);
        assert_eq!(avg_pool2d(&big, 3, 3).unwrap().shape(), &[1, 1, 16, 16]);

        assert!(avg_pool2d(&Tensor::zeros(&[1, 1, 5, 5]), 3, 3).is_err());
    }

    #[test]
    fn upsample_examples() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        let one = Tensor::full(&[1, 1, 1, 1], 7.0);
        assert_eq!(upsample_nearest(&one, 2).unwrap(), Tensor::full(&[1, 1, 2, 2], 7.0));
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(&up.data()[..4], &[1.0, 1.0, 2.0, 2.0]);

        let c = Tensor::full(&[1, 3, 6, 6], -0.5);
        let round = upsample_nearest(&avg_pool2d(&c, 2, 2).unwrap(), 2).unwrap();
        assert_eq!(round, c);
    }
}
