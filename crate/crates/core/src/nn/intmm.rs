use crate::error::{Error, Result};
use crate::qtensor::QTensor;
use crate::tensor::Tensor;

/// Result of an integer matmul: `i32` accumulators and the scale that maps
/// them back to reals.
#[derive(Debug, Clone, PartialEq)]
pub struct IntMatmul {
    pub shape: [usize; 2],
    pub acc: Vec<i32>,
    pub scale: f64,
}

impl IntMatmul {
    pub fn dequantize(&self) -> Tensor {
        let data = self.acc.iter().map(|&a| (a as f64 * self.scale) as f32).collect();
        Tensor::new(self.shape.to_vec(), data).expect("valid matmul shape")
    }
}

/// `[M, K] × [K, N]` over symmetric 8-bit operands with checked `i32`
/// accumulation. Overflow is reported, never wrapped.
pub fn int_matmul_i32(a: &QTensor, b: &QTensor) -> Result<IntMatmul> {
    for q in [a, b] {
        let p = q.params();
        if p.bits != 8 || !p.symmetric || q.shape().len() != 2 {
            return Err(Error::shape(format!(
                "int matmul needs 2-d symmetric 8-bit operands, got {:?} at {} bits",
                q.shape(),
                p.bits
            )));
        }
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if b.shape()[0] != k {
        return Err(Error::shape(format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (av, bv) = (a.values(), b.values());
    let mut acc = vec![0i32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s: i32 = 0;
            for p in 0..k {
                s = s
                    .checked_add(av[i * k + p] * bv[p * n + j])
                    .ok_or(Error::AccumulatorOverflow { row: i, col: j })?;
            }
            acc[i * n + j] = s;
        }
    }
    Ok(IntMatmul {
        shape: [m, n],
        acc,
        scale: a.params().scale * b.params().scale,
    })
}
