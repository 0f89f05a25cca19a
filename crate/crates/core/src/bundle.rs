//! `ModelBundle` binary format. All integers little endian.
//!
//! ```text
//! magic        4 bytes  "ANRL"
//! version      u32      = FORMAT_VERSION
//! header_len   u32
//! header       header_len bytes of compact JSON with sorted keys
//! n_tensors    u32
//! n_tensors entries:
//!   name_len   u16, then name_len bytes of UTF-8
//!   dtype      u8       0 f32, 1 i8, 2 i16, 3 i4 (two per byte, even index in the low nibble)
//!   rank       u8, then rank × u32 dims
//!   offset     u64      byte offset into the payload
//!   nbytes     u64
//!   (dtype != f32 only)
//!   scale      f64
//!   zero_point i32
//!   symmetric  u8       0 or 1
//! payload_len  u64
//! crc32        u32      CRC-32 (IEEE) of the payload
//! payload      payload_len bytes; tensors packed back to back in table order
//! ```
//!
//! f32 tensors are stored as IEEE-754 little endian. Offsets must be
//! contiguous starting at 0, so a bundle has exactly one encoding.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calib::{PrecisionPlan, QuantizedModel};
use crate::error::{Error, Result};
use crate::params::{copy_params, Params};
use crate::qtensor::{dequantize, payload_len, QTensor, QuantParams};
use crate::report::canonical_compact;
use crate::tensor::Tensor;
use crate::vit::{Vit, VitConfig};
use crate::vlm::{Vlm, VlmConfig};

pub const MAGIC: &[u8; 4] = b"ANRL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    I8 = 1,
    I16 = 2,
    I4 = 3,
}

impl DType {
    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => DType::F32,
            1 => DType::I8,
            2 => DType::I16,
            3 => DType::I4,
            c => return Err(Error::Format(format!("unknown dtype code {c}"))),
        })
    }

    fn for_bits(bits: u32) -> Result<Self> {
        Ok(match bits {
            4 => DType::I4,
            8 => DType::I8,
            16 => DType::I16,
            b => return Err(Error::Bits(b)),
        })
    }

    pub fn bits(self) -> u32 {
        match self {
            DType::F32 => 32,
            DType::I8 => 8,
            DType::I16 => 16,
            DType::I4 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vlm,
    Vit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub kind: ModelKind,
    pub config: Value,
    pub seed: u64,
    /// Present on quantized bundles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PrecisionPlan>,
    /// Frozen activation parameters of a quantized bundle, by site.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub activations: BTreeMap<String, QuantParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    F32(Tensor),
    Quant(QTensor),
}

impl Stored {
    pub fn dtype(&self) -> DType {
        match self {
            Stored::F32(_) => DType::F32,
            Stored::Quant(q) => DType::for_bits(q.params().bits).expect("validated bits"),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::Quant(q) => q.shape(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        match self {
            Stored::F32(t) => t.clone(),
            Stored::Quant(q) => dequantize(q),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Stored::F32(t) => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            Stored::Quant(q) => q.payload().to_vec(),
        }
    }
}

/// A rebuilt model, float or with quantization attached.
pub enum LoadedModel {
    Vlm(Vlm),
    Vit(Vit),
    QuantVlm(QuantizedModel<Vlm>),
    QuantVit(QuantizedModel<Vit>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub header: BundleHeader,
    pub tensors: Vec<(String, Stored)>,
}

fn float_tensors<M: Params>(m: &M) -> Vec<(String, Stored)> {
    m.named_params("").into_iter().map(|(n, t)| (n, Stored::F32(t.clone()))).collect()
}

/// Quantized tensors are stored under the model's own (unprefixed) names.
fn quant_tensors<M: Params>(q: &QuantizedModel<M>, prefix: &str) -> Result<Vec<(String, Stored)>> {
    let names = q.model.named_params("");
    if names.len() != q.weights.len() {
        return Err(Error::Format("quantized weight list does not match the model".into()));
    }
    names
        .into_iter()
        .zip(&q.weights)
        .map(|((n, _), (qn, qt))| {
            if crate::params::join(prefix, &n) != *qn {
                return Err(Error::Format(format!("weight `{qn}` out of order (expected `{n}`)")));
            }
            Ok((n, Stored::Quant(qt.clone())))
        })
        .collect()
}

impl ModelBundle {
    pub fn from_vlm(m: &Vlm, seed: u64) -> Result<Self> {
        Ok(Self {
            header: BundleHeader {
                kind: ModelKind::Vlm,
                config: serde_json::to_value(m.config())?,
                seed,
                plan: None,
                activations: BTreeMap::new(),
            },
            tensors: float_tensors(m),
        })
    }

    pub fn from_vit(m: &Vit, seed: u64) -> Result<Self> {
        Ok(Self {
            header: BundleHeader {
                kind: ModelKind::Vit,
                config: serde_json::to_value(m.cfg)?,
                seed,
                plan: None,
                activations: BTreeMap::new(),
            },
            tensors: float_tensors(m),
        })
    }

    pub fn from_quantized_vlm(q: &QuantizedModel<Vlm>, seed: u64) -> Result<Self> {
        let mut b = Self::from_vlm(&q.model, seed)?;
        b.tensors = quant_tensors(q, "")?;
        b.header.plan = Some(q.plan.clone());
        b.header.activations = q.activations.clone();
        Ok(b)
    }

    pub fn from_quantized_vit(q: &QuantizedModel<Vit>, seed: u64) -> Result<Self> {
        let mut b = Self::from_vit(&q.model, seed)?;
        b.tensors = quant_tensors(q, "vit")?;
        b.header.plan = Some(q.plan.clone());
        b.header.activations = q.activations.clone();
        Ok(b)
    }

    pub fn is_quantized(&self) -> bool {
        self.header.plan.is_some()
    }

    pub fn vlm_config(&self) -> Result<VlmConfig> {
        if self.header.kind != ModelKind::Vlm {
            return Err(Error::Format("bundle does not hold a vlm".into()));
        }
        Ok(serde_json::from_value(self.header.config.clone())?)
    }

    pub fn vit_config(&self) -> Result<VitConfig> {
        if self.header.kind != ModelKind::Vit {
            return Err(Error::Format("bundle does not hold a vit".into()));
        }
        Ok(serde_json::from_value(self.header.config.clone())?)
    }

    fn named(&self) -> Vec<(String, Tensor)> {
        self.tensors.iter().map(|(n, s)| (n.clone(), s.to_tensor())).collect()
    }

    fn quantized<M: Params>(&self, model: M, prefix: &str) -> QuantizedModel<M> {
        let weights = self
            .tensors
            .iter()
            .filter_map(|(n, s)| match s {
                Stored::Quant(q) => Some((crate::params::join(prefix, n), q.clone())),
                Stored::F32(_) => None,
            })
            .collect();
        QuantizedModel {
            model,
            weights,
            activations: self.header.activations.clone(),
            plan: self.header.plan.clone().expect("quantized bundle"),
        }
    }

    /// Rebuilds the model; quantized bundles execute their dequantized weights.
    pub fn load_model(&self) -> Result<LoadedModel> {
        let named = self.named();
        if self.is_quantized() && self.tensors.iter().any(|(_, s)| matches!(s, Stored::F32(_))) {
            return Err(Error::Format("quantized bundle holds f32 tensors".into()));
        }
        Ok(match self.header.kind {
            ModelKind::Vlm => {
                let mut m = Vlm::new(&self.vlm_config()?, 0)?;
                copy_params(&mut m, &named)?;
                if self.is_quantized() {
                    LoadedModel::QuantVlm(self.quantized(m, ""))
                } else {
                    LoadedModel::Vlm(m)
                }
            }
            ModelKind::Vit => {
                let mut m = Vit::new(self.vit_config()?, 0)?;
                copy_params(&mut m, &named)?;
                if self.is_quantized() {
                    LoadedModel::QuantVit(self.quantized(m, "vit"))
                } else {
                    LoadedModel::Vit(m)
                }
            }
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = canonical_compact(&serde_json::to_value(&self.header)?)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut payload = Vec::new();
        for (name, s) in &self.tensors {
            let bytes = s.bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name `{name}` too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(s.dtype() as u8);
            out.push(u8::try_from(s.shape().len()).map_err(|_| Error::Format(format!("`{name}` rank too large")))?);
            for &d in s.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::Format(format!("`{name}` dim too large")))?.to_le_bytes());
            }
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            if let Stored::Quant(q) = s {
                let p = q.params();
                out.extend_from_slice(&p.scale.to_le_bytes());
                out.extend_from_slice(&p.zero_point.to_le_bytes());
                out.push(p.symmetric as u8);
            }
            payload.extend_from_slice(&bytes);
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a model bundle (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::SchemaVersion {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let hlen = r.u32()? as usize;
        let header: BundleHeader = serde_json::from_slice(r.take(hlen)?)?;
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n.min(1 << 16));
        let mut expected_offset = 0u64;
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_code(r.u8()?)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            let nbytes = r.u64()?;
            let quant = match dtype {
                DType::F32 => None,
                _ => Some((r.f64()?, r.i32()?, r.u8()?)),
            };
            if offset != expected_offset {
                return Err(Error::Format(format!("`{name}` at offset {offset}, expected {expected_offset}")));
            }
            let elems: usize = shape.iter().product();
            let want = match dtype {
                DType::F32 => elems * 4,
                d => payload_len(elems, d.bits()),
            };
            if nbytes != want as u64 {
                return Err(Error::Format(format!("`{name}` declares {nbytes} bytes, shape needs {want}")));
            }
            expected_offset += nbytes;
            table.push((name, dtype, shape, offset as usize, nbytes as usize, quant));
        }
        let payload_len = r.u64()?;
        let crc = r.u32()?;
        if payload_len != expected_offset {
            return Err(Error::Format(format!("payload of {payload_len} bytes, table covers {expected_offset}")));
        }
        let payload = r.take(payload_len as usize)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if crc32fast::hash(payload) != crc {
            return Err(Error::Format("payload checksum mismatch".into()));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, dtype, shape, off, nb, quant) in table {
            let raw = &payload[off..off + nb];
            let s = match (dtype, quant) {
                (DType::F32, _) => {
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    Stored::F32(Tensor::new(shape, data)?)
                }
                (d, Some((scale, zp, sym))) => {
                    if sym > 1 {
                        return Err(Error::Format(format!("`{name}` symmetric flag {sym}")));
                    }
                    let p = QuantParams::new(scale, zp, d.bits(), sym == 1)?;
                    Stored::Quant(QTensor::from_payload(shape, raw.to_vec(), p)?)
                }
                (_, None) => unreachable!("quantized dtypes always carry params"),
            };
            tensors.push((name, s));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// CRC-32 of the payload, as stored in the file.
    pub fn payload_crc(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (_, s) in &self.tensors {
            h.update(&s.bytes());
        }
        h.finalize()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated bundle at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn i32(&mut self) -> Result<i32> {
        self.array().map(i32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }
}
