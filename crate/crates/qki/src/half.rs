//! IEEE 754 binary16 conversion with round-to-nearest-even.
//!
//! Conversion is done directly on the f64 bit pattern rather than through f32,
//! which avoids double-rounding at binary16 tie points. Values whose rounded
//! magnitude would overflow binary16 (|x| >= 65520) are rejected.

use crate::error::{QkiError, Result};

/// Largest finite binary16 value.
pub const HALF_MAX: f64 = 65504.0;
// Magnitudes at or above this round to infinity under round-to-nearest-even.
const OVERFLOW_THRESHOLD: f64 = 65520.0;

/// Encode an `f64` as binary16 bits, rounding to nearest-even.
pub fn encode_half(x: f64) -> Result<u16> {
    if !x.is_finite() {
        return Err(QkiError::Data(format!(
            "value {x} is not finite and cannot be stored as binary16"
        )));
    }
    if x.abs() >= OVERFLOW_THRESHOLD {
        return Err(QkiError::Data(format!(
            "value {x} exceeds the binary16 range (max {HALF_MAX})"
        )));
    }
    let bits = x.to_bits();
    let sign = ((bits >> 48) & 0x8000) as u16;
    let exp = ((bits >> 52) & 0x7FF) as i64;
    let man = bits & 0x000F_FFFF_FFFF_FFFF;
    if exp == 0 {
        // f64 zero or subnormal: far below the binary16 subnormal range.
        return Ok(sign);
    }
    let unbiased = exp - 1023;
    if unbiased >= -14 {
        // Normal binary16. Keep the top 10 mantissa bits, round the rest.
        let keep = (man >> 42) as u16;
        let rem = man & ((1u64 << 42) - 1);
        let half = 1u64 << 41;
        let mut m = keep;
        if rem > half || (rem == half && m & 1 == 1) {
            m += 1; // may carry into the exponent field, which is correct
        }
        let exp16 = (unbiased + 15) as u16;
        Ok(sign | ((exp16 << 10) + m))
    } else {
        // Subnormal binary16: quantize to multiples of 2^-24.
        let shift = (28 - unbiased) as u32;
        if shift >= 54 {
            return Ok(sign); // below half the smallest subnormal
        }
        let sig = (1u64 << 52) | man;
        let mut m = sig >> shift;
        let rem = sig & ((1u64 << shift) - 1);
        let half = 1u64 << (shift - 1);
        if rem > half || (rem == half && m & 1 == 1) {
            m += 1; // m == 1024 lands exactly on the smallest normal
        }
        Ok(sign | m as u16)
    }
}

/// Decode binary16 bits to the exactly represented `f64` value.
pub fn decode_half(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = (bits >> 10) & 0x1F;
    let man = (bits & 0x3FF) as f64;
    match exp {
        0 => sign * man * 2f64.powi(-24),
        31 => {
            if man == 0.0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            }
        }
        e => sign * (1024.0 + man) * 2f64.powi(e as i32 - 25),
    }
}
