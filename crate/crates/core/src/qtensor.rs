//! Per-tensor affine quantization, INT4 nibble packing and error metrics.
//!
//! A real value `x` maps to the integer grid as
//! `q = clamp(round_half_even(x / scale) + zero_point, qmin, qmax)` and back
//! as `x' = (q - zero_point) * scale`. Symmetric grids drop the most negative
//! code so that `[-qmax, qmax]` is balanced around zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u32,
    pub symmetric: bool,
}

/// Representable integer range for a bit width and symmetry.
pub fn qrange(bits: u32, symmetric: bool) -> Result<(i32, i32)> {
    check_bits(bits)?;
    Ok(if symmetric {
        let m = (1i32 << (bits - 1)) - 1;
        (-m, m)
    } else {
        (0, ((1i64 << bits) - 1) as i32)
    })
}

fn check_bits(bits: u32) -> Result<()> {
    match bits {
        4 | 8 | 16 => Ok(()),
        b => Err(Error::Bits(b)),
    }
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, bits: u32, symmetric: bool) -> Result<Self> {
        let p = Self {
            scale,
            zero_point,
            bits,
            symmetric,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = qrange(self.bits, self.symmetric)?;
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Params(format!("scale {} must be positive", self.scale)));
        }
        if self.symmetric && self.zero_point != 0 {
            return Err(Error::Params("symmetric params need zero_point 0".into()));
        }
        if self.zero_point < lo || self.zero_point > hi {
            return Err(Error::Params(format!(
                "zero_point {} outside [{lo}, {hi}]",
                self.zero_point
            )));
        }
        Ok(())
    }

    pub fn qmin(&self) -> i32 {
        qrange(self.bits, self.symmetric).expect("validated").0
    }

    pub fn qmax(&self) -> i32 {
        qrange(self.bits, self.symmetric).expect("validated").1
    }

    #[inline]
    pub fn quantize_value(&self, x: f32) -> i32 {
        let (lo, hi) = (self.qmin() as f64, self.qmax() as f64);
        let q = (x as f64 / self.scale).round_ties_even() + self.zero_point as f64;
        // NaN maps to the zero point
        if q.is_nan() {
            return self.zero_point;
        }
        q.clamp(lo, hi) as i32
    }

    #[inline]
    pub fn dequantize_value(&self, q: i32) -> f32 {
        ((q - self.zero_point) as f64 * self.scale) as f32
    }

    /// Quantize-dequantize a slice in place.
    pub fn fake_quant_slice(&self, xs: &mut [f32]) {
        let (lo, hi) = (self.qmin() as f64, self.qmax() as f64);
        let zp = self.zero_point as f64;
        for x in xs {
            let q = ((*x as f64 / self.scale).round_ties_even() + zp).clamp(lo, hi);
            let q = if q.is_nan() { zp } else { q };
            *x = ((q - zp) * self.scale) as f32;
        }
    }
}

/// Derives per-tensor parameters from a calibrated `[min_val, max_val]` range.
///
/// Asymmetric ranges are widened to contain zero so that zero is exactly
/// representable. An all-zero range yields `scale = 1, zero_point = 0`.
pub fn compute_quant_params(
    min_val: f64,
    max_val: f64,
    bits: u32,
    symmetric: bool,
) -> Result<QuantParams> {
    let (lo, hi) = qrange(bits, symmetric)?;
    if !(min_val.is_finite() && max_val.is_finite()) {
        return Err(Error::Params(format!("non-finite range [{min_val}, {max_val}]")));
    }
    if min_val > max_val {
        return Err(Error::InvalidRange {
            min: min_val,
            max: max_val,
        });
    }
    if symmetric {
        let amax = min_val.abs().max(max_val.abs());
        if amax == 0.0 {
            return QuantParams::new(1.0, 0, bits, true);
        }
        return QuantParams::new(amax / hi as f64, 0, bits, true);
    }
    let (min_val, max_val) = (min_val.min(0.0), max_val.max(0.0));
    if max_val - min_val == 0.0 {
        return QuantParams::new(1.0, 0, bits, false);
    }
    let scale = (max_val - min_val) / (hi - lo) as f64;
    let zp = ((-min_val / scale).round_ties_even() as i64).clamp(lo as i64, hi as i64) as i32;
    QuantParams::new(scale, zp, bits, false)
}

/// Integer payload at its storage width. 4-bit values are nibble packed with
/// the even index in the low nibble; 16-bit values are little endian.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Vec<usize>,
    payload: Vec<u8>,
    params: QuantParams,
}

impl QTensor {
    /// Builds a tensor from already quantized integers, checking their range.
    pub fn from_values(shape: Vec<usize>, values: &[i32], params: QuantParams) -> Result<Self> {
        params.validate()?;
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        let (lo, hi) = (params.qmin(), params.qmax());
        if let Some(&v) = values.iter().find(|&&v| v < lo || v > hi) {
            return Err(Error::OutOfRange {
                value: v as i64,
                lo: lo as i64,
                hi: hi as i64,
            });
        }
        let payload = encode_payload(values, params.bits, params.symmetric)?;
        Ok(Self {
            shape,
            payload,
            params,
        })
    }

    /// Wraps a raw storage payload (as read from disk).
    pub fn from_payload(shape: Vec<usize>, payload: Vec<u8>, params: QuantParams) -> Result<Self> {
        params.validate()?;
        let n: usize = shape.iter().product();
        if payload.len() != payload_len(n, params.bits) {
            return Err(Error::Format(format!(
                "payload of {} bytes for {n} {}-bit values",
                payload.len(),
                params.bits
            )));
        }
        let t = Self {
            shape,
            payload,
            params,
        };
        let (lo, hi) = (params.qmin(), params.qmax());
        if let Some(v) = t.values().into_iter().find(|&v| v < lo || v > hi) {
            return Err(Error::OutOfRange {
                value: v as i64,
                lo: lo as i64,
                hi: hi as i64,
            });
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<i32> {
        decode_payload(&self.payload, self.len(), self.params.bits, self.params.symmetric)
    }
}

/// Bytes needed to store `n` integers of the given width.
pub fn payload_len(n: usize, bits: u32) -> usize {
    match bits {
        4 => n.div_ceil(2),
        8 => n,
        _ => 2 * n,
    }
}

fn encode_payload(values: &[i32], bits: u32, symmetric: bool) -> Result<Vec<u8>> {
    Ok(match bits {
        4 if symmetric => pack_int4(values)?,
        4 => pack_nibbles(values, 0, 15)?,
        8 => values.iter().map(|&v| v as u8).collect(),
        16 => values.iter().flat_map(|&v| (v as u16).to_le_bytes()).collect(),
        b => return Err(Error::Bits(b)),
    })
}

fn decode_payload(bytes: &[u8], n: usize, bits: u32, symmetric: bool) -> Vec<i32> {
    match (bits, symmetric) {
        (4, true) => unpack_int4(bytes, n),
        (4, false) => unpack_nibbles(bytes, n, false),
        (8, true) => bytes.iter().map(|&b| b as i8 as i32).collect(),
        (8, false) => bytes.iter().map(|&b| b as i32).collect(),
        (_, true) => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
            .collect(),
        (_, false) => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as i32)
            .collect(),
    }
}

/// Packs signed 4-bit integers (`-8..=7`) two per byte, even index in the low nibble.
pub fn pack_int4(values: &[i32]) -> Result<Vec<u8>> {
    pack_nibbles(values, -8, 7)
}

/// Inverse of [`pack_int4`]; `count` trims the padding nibble of odd lengths.
pub fn unpack_int4(bytes: &[u8], count: usize) -> Vec<i32> {
    unpack_nibbles(bytes, count, true)
}

fn pack_nibbles(values: &[i32], lo: i32, hi: i32) -> Result<Vec<u8>> {
    if let Some(&v) = values.iter().find(|&&v| v < lo || v > hi) {
        return Err(Error::OutOfRange {
            value: v as i64,
            lo: lo as i64,
            hi: hi as i64,
        });
    }
    Ok(values
        .chunks(2)
        .map(|pair| {
            let low = (pair[0] as u8) & 0x0F;
            let high = pair.get(1).map_or(0, |&v| (v as u8) & 0x0F);
            low | (high << 4)
        })
        .collect())
}

fn unpack_nibbles(bytes: &[u8], count: usize, signed: bool) -> Vec<i32> {
    let nib = |n: u8| -> i32 {
        if signed {
            ((n << 4) as i8 >> 4) as i32
        } else {
            n as i32
        }
    };
    bytes
        .iter()
        .flat_map(|&b| [nib(b & 0x0F), nib(b >> 4)])
        .take(count)
        .collect()
}

pub fn quantize(t: &Tensor, p: &QuantParams) -> Result<QTensor> {
    p.validate()?;
    let values: Vec<i32> = t.data().iter().map(|&x| p.quantize_value(x)).collect();
    QTensor::from_values(t.shape().to_vec(), &values, *p)
}

pub fn dequantize(q: &QTensor) -> Tensor {
    let p = q.params();
    let data = q.values().into_iter().map(|v| p.dequantize_value(v)).collect();
    Tensor::new(q.shape().to_vec(), data).expect("qtensor shape is valid")
}

pub fn fake_quant(t: &Tensor, p: &QuantParams) -> Result<Tensor> {
    p.validate()?;
    let mut out = t.clone();
    p.fake_quant_slice(out.data_mut());
    Ok(out)
}

/// Symmetric per-tensor parameters from the tensor's own extrema.
pub fn weight_params(t: &Tensor, bits: u32) -> Result<QuantParams> {
    let (lo, hi) = t.min_max();
    compute_quant_params(lo as f64, hi as f64, bits, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// `None` in JSON stands for +infinity (zero noise).
    #[serde(with = "inf_as_null")]
    pub sqnr_db: f64,
    pub rms_error_percent: f64,
    pub max_abs_error: f64,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

struct Powers {
    signal: f64,
    noise: f64,
    max_abs: f64,
}

fn powers(reference: &Tensor, test: &Tensor) -> Result<Powers> {
    reference.check_same_shape(test)?;
    let mut p = Powers {
        signal: 0.0,
        noise: 0.0,
        max_abs: 0.0,
    };
    for (&r, &t) in reference.data().iter().zip(test.data()) {
        let (r, t) = (r as f64, t as f64);
        p.signal += r * r;
        let e = r - t;
        p.noise += e * e;
        p.max_abs = p.max_abs.max(e.abs());
    }
    if p.signal == 0.0 {
        return Err(Error::UndefinedSignal("reference tensor is all zero"));
    }
    Ok(p)
}

/// Signal-to-quantization-noise ratio in dB; `+inf` when the tensors match.
pub fn sqnr_db(reference: &Tensor, test: &Tensor) -> Result<f64> {
    let p = powers(reference, test)?;
    Ok(sqnr_from_powers(p.signal, p.noise))
}

fn sqnr_from_powers(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

/// RMS of the error as a percentage of the reference RMS.
pub fn rms_error_percent(reference: &Tensor, test: &Tensor) -> Result<f64> {
    let p = powers(reference, test)?;
    Ok(100.0 * (p.noise / p.signal).sqrt())
}

pub fn error_report(reference: &Tensor, test: &Tensor) -> Result<ErrorReport> {
    let p = powers(reference, test)?;
    Ok(ErrorReport {
        sqnr_db: sqnr_from_powers(p.signal, p.noise),
        rms_error_percent: 100.0 * (p.noise / p.signal).sqrt(),
        max_abs_error: p.max_abs,
    })
}

/// Accumulates signal and noise power over many tensor pairs.
#[derive(Debug, Clone, Default)]
pub struct ErrorAccumulator {
    signal: f64,
    noise: f64,
    max_abs: f64,
}

impl ErrorAccumulator {
    pub fn add(&mut self, reference: &Tensor, test: &Tensor) -> Result<()> {
        reference.check_same_shape(test)?;
        self.add_slice(reference.data(), test.data())
    }

    pub fn add_slice(&mut self, reference: &[f32], test: &[f32]) -> Result<()> {
        if reference.len() != test.len() {
            return Err(Error::shape(format!("{} vs {} values", reference.len(), test.len())));
        }
        for (&r, &t) in reference.iter().zip(test) {
            let (r, t) = (r as f64, t as f64);
            self.signal += r * r;
            self.noise += (r - t) * (r - t);
            self.max_abs = self.max_abs.max((r - t).abs());
        }
        Ok(())
    }

    pub fn report(&self) -> Result<ErrorReport> {
        if self.signal == 0.0 {
            return Err(Error::UndefinedSignal("accumulated reference is all zero"));
        }
        Ok(ErrorReport {
            sqnr_db: sqnr_from_powers(self.signal, self.noise),
            rms_error_percent: 100.0 * (self.noise / self.signal).sqrt(),
            max_abs_error: self.max_abs,
        })
    }
}
