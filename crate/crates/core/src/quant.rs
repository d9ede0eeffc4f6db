//! Int8 quantization: symmetric per-tensor quantization, fixed-point
//! requantization of int32 accumulators, and activation lookup tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("requantization scale must be positive and finite, got {0}")]
    BadScale(f64),
}

/// Symmetric (zero point 0) per-tensor quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub scale: f64,
}

impl QuantSpec {
    pub fn dequantize(&self, q: i8) -> f64 {
        f64::from(q) * self.scale
    }
}

pub fn saturate_i8(v: i64) -> i8 {
    v.clamp(i64::from(i8::MIN), i64::from(i8::MAX)) as i8
}

/// `scale = max|x| / 127`, round half to even, clamp. An all-zero tensor gets
/// scale 1 by convention.
pub fn quantize(values: &[f32]) -> Result<(Vec<i8>, QuantSpec), QuantError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite);
    }
    let max = values.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
    let q = values
        .iter()
        .map(|&v| saturate_i8((f64::from(v) / scale).round_ties_even() as i64))
        .collect();
    Ok((q, QuantSpec { scale }))
}

/// Fixed-point multiplier: `out = round_half_even(acc * multiplier / 2^shift)`,
/// then clamp to int8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Requant {
    pub multiplier: i32,
    pub shift: u32,
}

impl Requant {
    pub const IDENTITY: Requant = Requant { multiplier: 1 << 30, shift: 30 };

    /// Approximates a positive real ratio with a 31-bit normalized multiplier.
    pub fn from_real(ratio: f64) -> Result<Requant, QuantError> {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(QuantError::BadScale(ratio));
        }
        let mut shift: i32 = 30;
        let mut m = ratio * f64::from(1u32 << 30);
        while m >= f64::from(1u32 << 31) - 0.5 && shift > 0 {
            m /= 2.0;
            shift -= 1;
        }
        while m < f64::from(1u32 << 30) && shift < 62 {
            m *= 2.0;
            shift += 1;
        }
        let multiplier = m.round() as i64;
        Ok(Requant { multiplier: multiplier.min(i64::from(i32::MAX)) as i32, shift: shift as u32 })
    }

    pub fn ratio(&self) -> f64 {
        f64::from(self.multiplier) / 2f64.powi(self.shift as i32)
    }

    pub fn apply(&self, acc: i32) -> i8 {
        saturate_i8(rounding_shift_even(i64::from(acc) * i64::from(self.multiplier), self.shift))
    }
}

/// Arithmetic shift right with round-half-to-even.
pub fn rounding_shift_even(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        return v;
    }
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// 256-entry int8 -> int8 table indexed by the two's-complement byte.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lut(pub Vec<i8>);

impl Lut {
    pub fn lookup(&self, q: i8) -> i8 {
        self.0[usize::from(q as u8)]
    }

    /// GeLU on the int8 grid: `quantize(gelu(q * in_scale), out_scale)`, using
    /// the tanh form of GeLU.
    pub fn gelu(in_scale: f64, out_scale: f64) -> Lut {
        let table = (0..256u16)
            .map(|b| {
                let x = f64::from(b as u8 as i8) * in_scale;
                let g = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
                saturate_i8((g / out_scale).round_ties_even() as i64)
            })
            .collect();
        Lut(table)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "lut", rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Gelu(Lut),
}

/// Store-path transform from an int32 accumulator to int8: requantize, then
/// activate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PostOp {
    pub requant: Requant,
    pub activation: Activation,
}

impl PostOp {
    pub fn apply(&self, acc: i32) -> i8 {
        let q = self.requant.apply(acc);
        match &self.activation {
            Activation::None => q,
            Activation::Relu => q.max(0),
            Activation::Gelu(lut) => lut.lookup(q),
        }
    }
}
