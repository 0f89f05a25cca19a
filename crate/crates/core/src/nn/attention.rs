use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::act::softmax_in_place;
use crate::nn::linear::dot;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0
            || self.n_kv_heads == 0
            || self.head_dim == 0
            || self.n_heads % self.n_kv_heads != 0
            || self.n_heads * self.head_dim != self.d_model
        {
            return Err(Error::shape(format!("invalid attention spec {self:?}")));
        }
        Ok(())
    }

    pub fn is_mqa(&self) -> bool {
        self.n_kv_heads == 1
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn mask(&self) -> Mask {
        if self.causal {
            Mask::Causal
        } else {
            Mask::None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    /// Query `i` of `T` sees keys `0..=S-T+i`.
    Causal,
    None,
}

fn check(q: &Tensor, k: &Tensor, v: &Tensor, spec: &AttentionSpec, mask: Mask) -> Result<(usize, usize)> {
    spec.validate()?;
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::shape("attention operands must be [seq, features]"));
    }
    let (t, s) = (q.dim(0), k.dim(0));
    if q.dim(1) != spec.d_model || k.dim(1) != spec.kv_dim() || v.shape() != k.shape() {
        return Err(Error::shape(format!(
            "attention q {:?}, k {:?}, v {:?} for {spec:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if mask == Mask::Causal && t > s {
        return Err(Error::shape(format!("causal attention with {t} queries over {s} keys")));
    }
    Ok((t, s))
}

/// Visible key count for query `i`.
fn visible(mask: Mask, t: usize, s: usize, i: usize) -> usize {
    match mask {
        Mask::Causal => s - t + i + 1,
        Mask::None => s,
    }
}

fn head_row_probs(q: &Tensor, k: &Tensor, spec: &AttentionSpec, mask: Mask, head: usize, i: usize, t: usize, s: usize, probs: &mut [f32]) {
    let hd = spec.head_dim;
    let kvh = head / (spec.n_heads / spec.n_kv_heads);
    let scale = 1.0 / (hd as f32).sqrt();
    let qh = &q.row(i)[head * hd..(head + 1) * hd];
    let n = visible(mask, t, s, i);
    for (j, p) in probs[..n].iter_mut().enumerate() {
        *p = dot(qh, &k.row(j)[kvh * hd..(kvh + 1) * hd]) * scale;
    }
    softmax_in_place(&mut probs[..n]);
    probs[n..].fill(0.0);
}

/// Softmax probabilities `[n_heads, T, S]`; masked entries are exactly zero.
pub fn attention_probs(q: &Tensor, k: &Tensor, v: &Tensor, spec: &AttentionSpec, mask: Mask) -> Result<Tensor> {
    let (t, s) = check(q, k, v, spec, mask)?;
    let mut out = vec![0f32; spec.n_heads * t * s];
    out.par_chunks_mut(s).enumerate().for_each(|(r, row)| {
        head_row_probs(q, k, spec, mask, r / t, r % t, t, s, row);
    });
    Tensor::new(vec![spec.n_heads, t, s], out)
}

/// Weighted sum of value rows: `probs` is `[n_heads, T, S]`, `v` is
/// `[S, n_kv_heads · head_dim]`; output is `[T, d_model]`.
pub fn attend(probs: &Tensor, v: &Tensor, spec: &AttentionSpec) -> Result<Tensor> {
    spec.validate()?;
    if probs.rank() != 3 || probs.dim(0) != spec.n_heads || v.rank() != 2 || probs.dim(2) != v.dim(0) || v.dim(1) != spec.kv_dim() {
        return Err(Error::shape(format!("attend probs {:?} with v {:?}", probs.shape(), v.shape())));
    }
    let (t, s) = (probs.dim(1), probs.dim(2));
    let hd = spec.head_dim;
    let group = spec.n_heads / spec.n_kv_heads;
    let mut out = vec![0f32; t * spec.d_model];
    let row_fn = |(i, o_row): (usize, &mut [f32])| {
        for head in 0..spec.n_heads {
            let kvh = head / group;
            let p_row = &probs.data()[(head * t + i) * s..(head * t + i + 1) * s];
            let acc = &mut o_row[head * hd..(head + 1) * hd];
            for (j, &p) in p_row.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let vj = &v.row(j)[kvh * hd..(kvh + 1) * hd];
                for (a, &x) in acc.iter_mut().zip(vj) {
                    *a += p * x;
                }
            }
        }
    };
    if t * s * spec.d_model > 1 << 16 {
        out.par_chunks_mut(spec.d_model).enumerate().for_each(row_fn);
    } else {
        out.chunks_mut(spec.d_model).enumerate().for_each(row_fn);
    }
    Tensor::new(vec![t, spec.d_model], out)
}

/// Scaled dot-product attention with grouped key/value sharing: query head
/// `h` reads kv head `h / (n_heads / n_kv_heads)`. Output is `[T, d_model]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, spec: &AttentionSpec, mask: Mask) -> Result<Tensor> {
    let probs = attention_probs(q, k, v, spec, mask)?;
    attend(&probs, v, spec)
}
