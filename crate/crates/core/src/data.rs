//! Seeded synthetic inputs. No image codecs: everything is a raw tensor.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    /// iid uniform in [-1, 1]
    Uniform,
    /// iid standard normal
    Gaussian,
    /// Smooth gradients, gratings and a few soft blobs.
    Structured,
}

impl FromStr for ImageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "gaussian" => Ok(Self::Gaussian),
            "structured" => Ok(Self::Structured),
            other => Err(Error::config("kind", format!("`{other}` is not uniform, gaussian or structured"))),
        }
    }
}

impl fmt::Display for ImageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Gaussian => "gaussian",
            Self::Structured => "structured",
        })
    }
}

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `[channels, size, size]` image number `index` of the set named by `seed`.
pub fn synthetic_image(kind: ImageKind, seed: u64, index: u64, channels: usize, size: usize) -> Tensor {
    let mut rng = stream(seed, index);
    let shape = [channels, size, size];
    match kind {
        ImageKind::Uniform => Tensor::from_fn(&shape, |_| rng.gen_range(-1.0f32..=1.0)),
        ImageKind::Gaussian => Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut rng)),
        ImageKind::Structured => {
            let s = size as f32;
            let per_channel: Vec<[f32; 6]> = (0..channels)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0f32..1.0)))
                .collect();
            let blobs: Vec<[f32; 4]> = (0..3)
                .map(|_| [rng.gen_range(0.0..s), rng.gen_range(0.0..s), rng.gen_range(0.05..0.25) * s, rng.gen_range(-1.0f32..1.0)])
                .collect();
            let freq = rng.gen_range(1.0f32..6.0) * std::f32::consts::TAU / s;
            let angle = rng.gen_range(0.0f32..std::f32::consts::PI);
            let (ca, sa) = (angle.cos(), angle.sin());
            Tensor::from_fn(&shape, |i| {
                let c = i / (size * size);
                let (y, x) = (((i / size) % size) as f32, (i % size) as f32);
                let p = per_channel[c];
                let mut v = p[0] + p[1] * (x / s - 0.5) + p[2] * (y / s - 0.5);
                v += 0.5 * p[3] * ((x * ca + y * sa) * freq + p[4]).sin();
                for b in &blobs {
                    let d2 = (x - b[0]).powi(2) + (y - b[1]).powi(2);
                    v += b[3] * p[5] * (-d2 / (2.0 * b[2] * b[2])).exp();
                }
                v.clamp(-1.0, 1.0)
            })
        }
    }
}

/// Raw tensor file: little-endian `u32` rank, `rank` × `u32` dims, then the
/// `f32` values.
pub fn encode_raw_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw_tensor(bytes: &[u8]) -> Result<Tensor> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Format("truncated raw tensor header".into()))
    };
    let rank = word(0)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("raw tensor rank {rank} > 8")));
    }
    let shape = (1..=rank).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let body = &bytes[4 * (rank + 1)..];
    if body.len() != 4 * n {
        return Err(Error::Format(format!("raw tensor {shape:?} needs {} payload bytes, found {}", 4 * n, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data)
}

pub fn write_raw_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_raw_tensor(t))?;
    Ok(())
}

pub fn read_raw_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_raw_tensor(&std::fs::read(path)?)
}
