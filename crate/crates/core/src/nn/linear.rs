use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::act::silu;
use crate::tensor::Tensor;

/// Work size (in MACs) above which row loops fan out over the rayon pool.
const PAR_THRESHOLD: usize = 1 << 16;

/// Dot product with eight independent accumulators. The reduction order
/// depends only on the slice length, so results are reproducible.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y = x · Wᵀ + b` over the last axis. `w` is `[out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::shape(format!("linear weight must be 2-d, got {:?}", w.shape())));
    }
    let (out_dim, in_dim) = (w.dim(0), w.dim(1));
    if x.last_dim() != in_dim {
        return Err(Error::shape(format!(
            "linear input {:?} against weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(Error::shape(format!("bias {:?} for {out_dim} outputs", b.shape())));
        }
    }
    let rows = x.rows();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    let mut out = vec![0f32; rows * out_dim];
    let wd = w.data();
    let bias = b.map(|b| b.data());
    let row_fn = |(r, o_row): (usize, &mut [f32])| {
        let xr = x.row(r);
        for (o, y) in o_row.iter_mut().enumerate() {
            *y = dot(&wd[o * in_dim..(o + 1) * in_dim], xr) + bias.map_or(0.0, |b| b[o]);
        }
    };
    let work = rows * out_dim * in_dim;
    if work < PAR_THRESHOLD {
        out.chunks_mut(out_dim).enumerate().for_each(row_fn);
    } else if rows > 1 {
        out.par_chunks_mut(out_dim).enumerate().for_each(row_fn);
    } else {
        // single row: split the output features instead
        let xr = x.row(0);
        out.par_chunks_mut(64).enumerate().for_each(|(c, ys)| {
            for (j, y) in ys.iter_mut().enumerate() {
                let o = c * 64 + j;
                *y = dot(&wd[o * in_dim..(o + 1) * in_dim], xr) + bias.map_or(0.0, |b| b[o]);
            }
        });
    }
    Tensor::new(shape, out)
}

/// Dense layer with `[out, in]` weight and optional bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

/// `w_down · (silu(w_gate · x) ⊙ (w_up · x))` applied per row.
pub fn swiglu_ffn(x: &Tensor, w_gate: &Tensor, w_up: &Tensor, w_down: &Tensor) -> Result<Tensor> {
    if w_gate.shape() != w_up.shape() || w_down.rank() != 2 || w_down.dim(1) != w_gate.dim(0) {
        return Err(Error::shape(format!(
            "swiglu gate {:?}, up {:?}, down {:?}",
            w_gate.shape(),
            w_up.shape(),
            w_down.shape()
        )));
    }
    let gate = linear(x, w_gate, None)?;
    let up = linear(x, w_up, None)?;
    let mut h = gate;
    for (g, u) in h.data_mut().iter_mut().zip(up.data()) {
        *g = silu(*g) * u;
    }
    linear(&h, w_down, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        for n in [0usize, 1, 7, 8, 9, 33] {
            let a: Vec<f32> = (0..n).map(|i| i as f32 * 0.5 - 3.0).collect();
            let b: Vec<f32> = (0..n).map(|i| 1.0 - i as f32 * 0.25).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
            assert!((dot(&a, &b) as f64 - naive).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_shapes() {
        let x = Tensor::zeros(&[3, 4]);
        let w = Tensor::zeros(&[5, 4]);
        assert_eq!(linear(&x, &w, None).unwrap().shape(), &[3, 5]);
        assert!(linear(&x, &Tensor::zeros(&[5, 3]), None).is_err());
        assert!(linear(&x, &w, Some(&Tensor::zeros(&[4]))).is_err());
    }

    #[test]
    fn parallel_paths_agree_with_serial() {
        let x = Tensor::from_fn(&[1, 300], |i| ((i * 37 % 11) as f32 - 5.0) * 0.1);
        let w = Tensor::from_fn(&[513, 300], |i| ((i * 13 % 7) as f32 - 3.0) * 0.05);
        let y = linear(&x, &w, None).unwrap();
        for o in [0, 63, 64, 512] {
            let expect = dot(w.row(o), x.row(0));
            assert_eq!(y.data()[o], expect);
        }
    }

    #[test]
    fn swiglu_zero_input() {
        let x = Tensor::zeros(&[1, 4]);
        let g = Tensor::full(&[6, 4], 0.3);
        let d = Tensor::full(&[4, 6], 0.2);
        let y = swiglu_ffn(&x, &g, &g, &d).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
