//! Storage formats for the frozen, scale-normalized weights `Φ₀ = φ(W₀ / s₀)`.
//!
//! | format            | payload per element | values                                 |
//! |-------------------|---------------------|----------------------------------------|
//! | `Fp32`            | 4 bytes             | nearest `f32`                          |
//! | `Bf16`            | 2 bytes             | nearest bfloat16, ties to even         |
//! | `FixedPoint(b)`   | 1 byte              | `Qb.(8−b)`: `round(2^(8−b)·clip(x))`   |
//! | `IntPacked(b)`    | ½ byte              | `clip(round(x))`, two codes per byte   |
//!
//! Packed layout: the element with the even row-major index goes in the low
//! nibble, the next one in the high nibble, both as 4-bit two's complement.
//! An odd trailing element is paired with a zero nibble that the shape
//! excludes on upcast. All multi-byte payloads are little-endian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::quantsim::round_half_even;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DowncastFormat {
    Fp32,
    Bf16,
    /// `b` integer bits and `8 − b` fractional bits in one signed byte.
    FixedPoint(u8),
    /// Signed `b`-bit integers, two per byte.
    IntPacked(u8),
}

impl DowncastFormat {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DowncastFormat::FixedPoint(b) if !(2..=7).contains(&b) => Err(Error::Config(
                format!("fixed-point format needs 2 <= b <= 7, got {b}"),
            )),
            DowncastFormat::IntPacked(b) if !(2..=4).contains(&b) => Err(Error::Config(format!(
                "packed integer format needs 2 <= b <= 4, got {b}"
            ))),
            _ => Ok(()),
        }
    }

    /// Payload size in bytes for `n` elements.
    pub fn payload_len(&self, n: usize) -> usize {
        match self {
            DowncastFormat::Fp32 => 4 * n,
            DowncastFormat::Bf16 => 2 * n,
            DowncastFormat::FixedPoint(_) => n,
            DowncastFormat::IntPacked(_) => n.div_ceil(2),
        }
    }

    /// Integer-part bits of the representable range, if bounded.
    pub fn bits(&self) -> Option<u8> {
        match *self {
            DowncastFormat::FixedPoint(b) | DowncastFormat::IntPacked(b) => Some(b),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            DowncastFormat::Fp32 => "FP32".into(),
            DowncastFormat::Bf16 => "BF16".into(),
            DowncastFormat::FixedPoint(b) => format!("Q{b}.{}", 8 - b),
            DowncastFormat::IntPacked(b) => format!("INT{b}x2"),
        }
    }
}

#[inline]
fn signed_range(b: u8) -> (f64, f64) {
    (-((1i32 << (b - 1)) as f64), ((1i32 << (b - 1)) - 1) as f64)
}

/// `round(2^(8−b) · clip(x, −2^(b−1), 2^(b−1)−1))` as a signed byte.
pub fn dc_fixed_point(x: f64, b: u8) -> i8 {
    debug_assert!((2..=7).contains(&b));
    let (lo, hi) = signed_range(b);
    let code = round_half_even(x.clamp(lo, hi) * (1u32 << (8 - b)) as f64);
    // 2^(8-b) * (2^(b-1) - 1) rounds to at most 127 - 2^(8-b) + 1 <= 127.
    code as i8
}

/// `code / 2^(8−b)`, exact.
#[inline]
pub fn dc_inv_fixed_point(code: i8, b: u8) -> f64 {
    code as f64 / (1u32 << (8 - b)) as f64
}

/// `clip(round(x), −2^(b−1), 2^(b−1)−1)`; rounding happens before clipping.
pub fn dc_int(x: f64, b: u8) -> i8 {
    let (lo, hi) = signed_range(b);
    round_half_even(x).clamp(lo, hi) as i8
}

/// Packs two signed codes of at most `bits` bits into one byte.
pub fn pack_pair(lo: i8, hi: i8, bits: u8) -> Result<u8> {
    let b = bits.min(4);
    let (min, max) = (-(1i8 << (b - 1)), (1i8 << (b - 1)) - 1);
    for c in [lo, hi] {
        if c < min || c > max {
            return Err(Error::Range(format!("code {c} does not fit in {bits} bits")));
        }
    }
    Ok((lo as u8 & 0x0F) | ((hi as u8 & 0x0F) << 4))
}

/// Inverse of [`pack_pair`]: sign-extends both nibbles.
#[inline]
pub fn unpack_pair(byte: u8) -> (i8, i8) {
    (((byte << 4) as i8) >> 4, (byte as i8) >> 4)
}

/// Largest finite bfloat16, `(2 − 2⁻⁷) · 2¹²⁷`.
pub const BF16_MAX: f64 = 3.389_531_389_251_535_5e38;

/// Nearest bfloat16 code (ties to even mantissa). Out-of-range magnitudes
/// saturate to ±[`BF16_MAX`].
pub fn bf16_round(x: f64) -> u16 {
    let sign = if x.is_sign_negative() { 0x8000u16 } else { 0 };
    let a = x.abs();
    if a == 0.0 {
        return sign;
    }
    // bfloat16 shares f32's exponent range: normals down to 2^-126, then
    // subnormal spacing 2^-133.
    let exp = (a.log2().floor() as i32).max(-126);
    // log2 can be off by one right at a binade edge; pin it.
    let exp = if 2f64.powi(exp) > a && exp > -126 {
        exp - 1
    } else if 2f64.powi(exp + 1) <= a {
        exp + 1
    } else {
        exp
    };
    let ulp = 2f64.powi(exp - 7);
    let rounded = round_half_even(a / ulp) * ulp;
    let clamped = rounded.min(BF16_MAX);
    sign | ((clamped as f32).to_bits() >> 16) as u16
}

#[inline]
pub fn bf16_upcast(code: u16) -> f64 {
    f32::from_bits((code as u32) << 16) as f64
}

/// A frozen tensor in one of the [`DowncastFormat`]s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DowncastTensor {
    format: DowncastFormat,
    rows: usize,
    cols: usize,
    payload: Vec<u8>,
}

impl DowncastTensor {
    /// Wraps an existing payload, checking its length against the shape.
    pub fn from_parts(
        format: DowncastFormat,
        rows: usize,
        cols: usize,
        payload: Vec<u8>,
    ) -> Result<Self> {
        format.validate()?;
        let expected = format.payload_len(rows * cols);
        if payload.len() != expected {
            return Err(Error::Shape(format!(
                "{} payload for {rows}x{cols} must be {expected} bytes, got {}",
                format.label(),
                payload.len()
            )));
        }
        Ok(Self {
            format,
            rows,
            cols,
            payload,
        })
    }

    pub fn format(&self) -> DowncastFormat {
        self.format
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }
}

pub fn downcast_tensor(v: &Matrix, format: DowncastFormat) -> Result<DowncastTensor> {
    format.validate()?;
    let payload = match format {
        DowncastFormat::Fp32 => v
            .data()
            .iter()
            .flat_map(|&x| (x as f32).to_le_bytes())
            .collect(),
        DowncastFormat::Bf16 => v
            .data()
            .iter()
            .flat_map(|&x| bf16_round(x).to_le_bytes())
            .collect(),
        DowncastFormat::FixedPoint(b) => v.data().iter().map(|&x| dc_fixed_point(x, b) as u8).collect(),
        DowncastFormat::IntPacked(b) => v
            .data()
            .chunks(2)
            .map(|pair| {
                let lo = dc_int(pair[0], b);
                let hi = pair.get(1).map_or(0, |&x| dc_int(x, b));
                pack_pair(lo, hi, b)
            })
            .collect::<Result<Vec<u8>>>()?,
    };
    DowncastTensor::from_parts(format, v.rows(), v.cols(), payload)
}

pub fn upcast_tensor(t: &DowncastTensor) -> Matrix {
    let n = t.rows * t.cols;
    let data: Vec<f64> = match t.format {
        DowncastFormat::Fp32 => t
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DowncastFormat::Bf16 => t
            .payload
            .chunks_exact(2)
            .map(|c| bf16_upcast(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        DowncastFormat::FixedPoint(b) => t
            .payload
            .iter()
            .map(|&c| dc_inv_fixed_point(c as i8, b))
            .collect(),
        DowncastFormat::IntPacked(_) => t
            .payload
            .iter()
            .flat_map(|&byte| {
                let (lo, hi) = unpack_pair(byte);
                [lo as f64, hi as f64]
            })
            .take(n)
            .collect(),
    };
    Matrix::from_vec(t.rows, t.cols, data).expect("payload length checked on construction")
}

/// Packs signed codes (each within `bits`) two per byte, low nibble first.
pub fn pack_codes(codes: &[i32], bits: u8) -> Result<Vec<u8>> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = i8::try_from(pair[0]).map_err(|_| Error::Range(format!("code {}", pair[0])))?;
            let hi = match pair.get(1) {
                Some(&c) => i8::try_from(c).map_err(|_| Error::Range(format!("code {c}")))?,
                None => 0,
            };
            pack_pair(lo, hi, bits)
        })
        .collect()
}

pub fn unpack_codes(bytes: &[u8], n: usize) -> Vec<i32> {
    bytes
        .iter()
        .flat_map(|&b| {
            let (lo, hi) = unpack_pair(b);
            [lo as i32, hi as i32]
        })
        .take(n)
        .collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn fixed_point_half_step_bound(x in -20.0f64..20.0, b in 2u8..=7) {
            let (lo, hi) = signed_range(b);
            let back = dc_inv_fixed_point(dc_fixed_point(x, b), b);
            prop_assert!((back - x.clamp(lo, hi)).abs() <= 2f64.powi(-(8 - b as i32)) / 2.0);
        }

        #[test]
        fn bf16_roundtrip_is_nearest(x in -1e6f64..1e6) {
            let y = bf16_upcast(bf16_round(x));
            let code = bf16_round(x);
            // Neighbouring representable values are no closer.
            for nb in [code.wrapping_add(1), code.wrapping_sub(1)] {
                let z = bf16_upcast(nb);
                if z.is_finite() {
                    prop_assert!((y - x).abs() <= (z - x).abs());
                }
            }
        }
    }
}
