//! Absmean ternary weight quantization, per-token absmax Int8 activation
//! quantization, the integer inference GEMM, and the packed trit codecs.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, HgfError, Result};
use crate::tensor::DenseTensor;

/// Lower clamp applied to both the weight scale and the activation scales.
pub const SCALE_EPS: f32 = 1e-5;

/// Symmetric Int8 activation range.
pub const ACT_MAX: f32 = 127.0;

/// Largest inner dimension for which a 32-bit accumulator of `127 · 1` products cannot overflow.
pub const MAX_INNER_DIM: usize = (i32::MAX / 127) as usize;

/// Byte layout for packed trits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PackingMode {
    /// Four trits per byte, two bits each: -1 → `0b10`, 0 → `0b00`, +1 → `0b01`.
    #[serde(rename = "2bit")]
    TwoBit,
    /// Five trits per byte as base-3 digits `trit + 1`.
    #[serde(rename = "5pb")]
    FivePerByte,
}

impl PackingMode {
    pub fn trits_per_byte(self) -> usize {
        match self {
            PackingMode::TwoBit => 4,
            PackingMode::FivePerByte => 5,
        }
    }

    pub fn packed_len(self, n: usize) -> usize {
        n.div_ceil(self.trits_per_byte())
    }

    pub fn bits_per_trit(self) -> f64 {
        8.0 / self.trits_per_byte() as f64
    }
}

impl std::str::FromStr for PackingMode {
    type Err = HgfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2bit" => Ok(PackingMode::TwoBit),
            "5pb" => Ok(PackingMode::FivePerByte),
            other => Err(HgfError::Codec(format!("unknown packing mode `{other}` (2bit|5pb)"))),
        }
    }
}

impl std::fmt::Display for PackingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PackingMode::TwoBit => "2bit",
            PackingMode::FivePerByte => "5pb",
        })
    }
}

fn check_trit(t: i8, i: usize) -> Result<()> {
    if (-1..=1).contains(&t) {
        Ok(())
    } else {
        Err(HgfError::Codec(format!("value {t} at position {i} is not a trit")))
    }
}

pub fn pack_trits(trits: &[i8], mode: PackingMode) -> Result<Vec<u8>> {
    let mut out = vec![0u8; mode.packed_len(trits.len())];
    match mode {
        PackingMode::TwoBit => {
            for (i, &t) in trits.iter().enumerate() {
                check_trit(t, i)?;
                let code = match t {
                    -1 => 0b10,
                    1 => 0b01,
                    _ => 0b00,
                };
                out[i / 4] |= code << (2 * (i % 4));
            }
        }
        PackingMode::FivePerByte => {
            for (k, chunk) in trits.chunks(5).enumerate() {
                let mut value = 0u8;
                let mut place = 1u8;
                for j in 0..5 {
                    let t = chunk.get(j).copied().unwrap_or(0);
                    check_trit(t, 5 * k + j)?;
                    value += (t + 1) as u8 * place;
                    place = place.wrapping_mul(3);
                }
                out[k] = value;
            }
        }
    }
    Ok(out)
}

/// Decodes `n` trits. The buffer must be exactly [`PackingMode::packed_len`]
/// bytes and its padding must encode zero trits.
pub fn unpack_trits(bytes: &[u8], n: usize, mode: PackingMode) -> Result<Vec<i8>> {
    let expected = mode.packed_len(n);
    if bytes.len() != expected {
        return Err(HgfError::Codec(format!(
            "{n} trits need {expected} bytes in {mode} mode, got {}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for (k, &byte) in bytes.iter().enumerate() {
        match mode {
            PackingMode::TwoBit => {
                for j in 0..4 {
                    let t = match (byte >> (2 * j)) & 0b11 {
                        0b00 => 0,
                        0b01 => 1,
                        0b10 => -1,
                        _ => return Err(HgfError::Codec(format!("invalid pair 0b11 in byte {k}"))),
                    };
                    push_or_check_padding(&mut out, n, t, k)?;
                }
            }
            PackingMode::FivePerByte => {
                if byte >= 243 {
                    return Err(HgfError::Codec(format!("byte {k} value {byte} exceeds 3^5 - 1")));
                }
                let mut v = byte;
                for _ in 0..5 {
                    push_or_check_padding(&mut out, n, (v % 3) as i8 - 1, k)?;
                    v /= 3;
                }
            }
        }
    }
    debug_assert_eq!(out.len(), n);
    Ok(out)
}

fn push_or_check_padding(out: &mut Vec<i8>, n: usize, t: i8, byte: usize) -> Result<()> {
    if out.len() < n {
        out.push(t);
        Ok(())
    } else if t != 0 {
        Err(HgfError::Codec(format!("nonzero padding in byte {byte}")))
    } else {
        Ok(())
    }
}

/// `round(x)` with ties to even, the rounding mode used by every quantizer.
#[inline]
pub fn round_half_even(x: f32) -> f32 {
    x.round_ties_even()
}

/// Absmean scale `γ_W = max(mean|W|, ε)` with FP64 accumulation.
pub fn weight_scale(w: &[f32]) -> f32 {
    let mean = w.iter().map(|v| v.abs() as f64).sum::<f64>() / w.len() as f64;
    (mean as f32).max(SCALE_EPS)
}

/// Ternarizes a flat weight buffer: returns trits and `γ_W`.
pub fn ternarize(w: &[f32]) -> (Vec<i8>, f32) {
    let scale = weight_scale(w);
    let trits = w
        .iter()
        .map(|&v| round_half_even(v / scale).clamp(-1.0, 1.0) as i8)
        .collect();
    (trits, scale)
}

/// Fake-quantized weight values `γ_W · trit` (the STE forward value).
pub fn fake_quantize_weights(w: &[f32]) -> Vec<f32> {
    let (trits, scale) = ternarize(w);
    trits.into_iter().map(|t| t as f32 * scale).collect()
}

/// A ternary weight matrix `[out_features × in_features]` with its scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryWeight {
    out_features: usize,
    in_features: usize,
    scale: f32,
    packing: PackingMode,
    packed: Vec<u8>,
}

impl TernaryWeight {
    pub fn from_trits(
        out_features: usize,
        in_features: usize,
        trits: &[i8],
        scale: f32,
        packing: PackingMode,
    ) -> Result<Self> {
        if trits.len() != out_features * in_features {
            return Err(dim_err("ternary weight", "trit count does not match shape"));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(HgfError::Contract(format!(
                "ternary scale must be positive, got {scale}"
            )));
        }
        Ok(Self {
            out_features,
            in_features,
            scale,
            packing,
            packed: pack_trits(trits, packing)?,
        })
    }

    /// Wraps an already packed buffer, validating it decodes.
    pub fn from_packed(
        out_features: usize,
        in_features: usize,
        packed: Vec<u8>,
        scale: f32,
        packing: PackingMode,
    ) -> Result<Self> {
        let trits = unpack_trits(&packed, out_features * in_features, packing)?;
        Self::from_trits(out_features, in_features, &trits, scale, packing)
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn packing(&self) -> PackingMode {
        self.packing
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn trits(&self) -> Vec<i8> {
        unpack_trits(&self.packed, self.out_features * self.in_features, self.packing)
            .expect("packed buffer validated at construction")
    }

    pub fn dequantize(&self) -> DenseTensor {
        let data = self.trits().into_iter().map(|t| t as f32 * self.scale).collect();
        DenseTensor::from_parts(vec![self.out_features, self.in_features], data)
    }

    pub fn repack(&self, packing: PackingMode) -> Self {
        Self::from_trits(self.out_features, self.in_features, &self.trits(), self.scale, packing)
            .expect("trits already validated")
    }
}

/// Quantizes a 2-D latent weight to ternary with the absmean scale.
pub fn quantize_weights(w: &DenseTensor, packing: PackingMode) -> Result<TernaryWeight> {
    if w.ndim() != 2 {
        return Err(dim_err(
            "quantize_weights",
            format!("expected 2-D weight, got {:?}", w.shape()),
        ));
    }
    let (trits, scale) = ternarize(w.data());
    TernaryWeight::from_trits(w.shape()[0], w.shape()[1], &trits, scale, packing)
}

/// Int8 activations with one scale per token (row of the last axis).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedActivation {
    pub shape: Vec<usize>,
    pub values: Vec<i8>,
    pub scales: Vec<f32>,
}

/// Absmax token scale `γ_x = max(max|x|, ε)`.
pub fn token_scale(row: &[f32]) -> f32 {
    row.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(SCALE_EPS)
}

#[inline]
fn quantize_value(v: f32, scale: f32) -> f32 {
    round_half_even(v / scale * ACT_MAX).clamp(-ACT_MAX, ACT_MAX)
}

pub fn quantize_activations(x: &DenseTensor) -> QuantizedActivation {
    let width = x.last_dim();
    let mut values = Vec::with_capacity(x.numel());
    let mut scales = Vec::with_capacity(x.rows());
    for row in x.data().chunks(width) {
        let s = token_scale(row);
        values.extend(row.iter().map(|&v| quantize_value(v, s) as i8));
        scales.push(s);
    }
    QuantizedActivation {
        shape: x.shape().to_vec(),
        values,
        scales,
    }
}

/// Fake-quantized activations `x̃ · γ_x / 127` (the STE forward value).
pub fn fake_quantize_activations(x: &[f32], width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let s = token_scale(row);
        out.extend(row.iter().map(|&v| quantize_value(v, s) * s / ACT_MAX));
    }
    out
}

/// Inference-path ternary linear: Int8 activations times trits with 32-bit
/// integer accumulation, dequantized by `γ_x · γ_W / 127`.
pub fn ternary_forward(x: &DenseTensor, w: &TernaryWeight) -> Result<DenseTensor> {
    let d_in = x.last_dim();
    if d_in != w.in_features {
        return Err(dim_err(
            "ternary_forward",
            format!("input width {d_in} != in_features {}", w.in_features),
        ));
    }
    if d_in > MAX_INNER_DIM {
        return Err(HgfError::Contract(format!(
            "inner dimension {d_in} could overflow the Int32 accumulator"
        )));
    }
    let q = quantize_activations(x);
    let trits = w.trits();
    let d_out = w.out_features;
    let mut out = Vec::with_capacity(x.rows() * d_out);
    for (t, xrow) in q.values.chunks(d_in).enumerate() {
        let factor = q.scales[t] * w.scale / ACT_MAX;
        for wrow in trits.chunks(d_in) {
            let acc: i32 = xrow.iter().zip(wrow).map(|(&a, &b)| a as i32 * b as i32).sum();
            out.push(acc as f32 * factor);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = d_out;
    Ok(DenseTensor::from_parts(shape, out))
}
