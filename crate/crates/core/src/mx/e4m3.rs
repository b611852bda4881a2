//! FP8 E4M3 codec (1 sign, 4 exponent bits with bias 7, 3 mantissa bits).
//!
//! There are no infinities; `S.1111.111` is NaN and the largest finite
//! magnitude is 448. Encoding rounds to nearest with ties to even and
//! saturates out-of-range magnitudes to ±448.

pub const MAX_FINITE: f64 = 448.0;
pub const NAN: u8 = 0x7F;
pub const MAX_POSITIVE: u8 = 0x7E;

const MIN_NORMAL: f64 = 1.0 / 64.0; // 2^-6
const SUBNORMAL_STEP: f64 = 1.0 / 512.0; // 2^-9

pub fn decode(b: u8) -> f64 {
    let sign = if b & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = ((b >> 3) & 0x0F) as i32;
    let man = (b & 0x07) as f64;
    if exp == 0x0F && b & 0x07 == 0x07 {
        return f64::NAN;
    }
    let mag = if exp == 0 {
        man * SUBNORMAL_STEP
    } else {
        (1.0 + man / 8.0) * 2f64.powi(exp - 7)
    };
    sign * mag
}

pub fn encode(v: f64) -> u8 {
    if v.is_nan() {
        return NAN;
    }
    let sign = if v.is_sign_negative() { 0x80 } else { 0x00 };
    let a = v.abs();
    if a >= MAX_FINITE {
        return sign | MAX_POSITIVE;
    }
    let code = if a < MIN_NORMAL {
        // m == 8 rolls into the smallest normal, which is code 0x08.
        (a / SUBNORMAL_STEP).round_ties_even() as u8
    } else {
        let e = ((a.to_bits() >> 52) & 0x7FF) as i32 - 1023;
        let frac = a * 2f64.powi(-e);
        let m = ((frac - 1.0) * 8.0).round_ties_even() as u8;
        (((e + 7) as u8) << 3) + m
    };
    sign | code.min(MAX_POSITIVE)
}

/// Smallest non-negative E4M3 value `>= v` for `0 <= v <= 448`.
pub fn encode_ceil(v: f64) -> u8 {
    let mut b = encode(v.max(0.0)) & 0x7F;
    if decode(b) < v && b < MAX_POSITIVE {
        b += 1;
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_values() {
        assert_eq!(encode(1.0), 0x38);
        assert_eq!(encode(0.0), 0x00);
        assert_eq!(encode(-0.0), 0x80);
        assert_eq!(encode(500.0), 0x7E);
        assert_eq!(encode(-1e9), 0xFE);
        assert_eq!(encode(f64::INFINITY), 0x7E);
        assert_eq!(decode(0x38), 1.0);
        assert_eq!(decode(0x7E), 448.0);
        assert!(decode(0x7F).is_nan());
        assert!(decode(0xFF).is_nan());
        assert_eq!(decode(0x01), 1.0 / 512.0);
    }

    #[test]
    fn decode_encode_decode_fixed_point() {
        for b in 0..=255u8 {
            let v = decode(b);
            let again = decode(encode(v));
            if v.is_nan() {
                assert!(again.is_nan());
            } else {
                assert_eq!(again, v, "byte {b:#04x}");
            }
        }
    }

    #[test]
    fn ties_to_even() {
        // 1.0625 lies halfway between 1.0 (m=0) and 1.125 (m=1).
        assert_eq!(encode(1.0625), 0x38);
        // 1.1875 lies halfway between 1.125 (m=1) and 1.25 (m=2).
        assert_eq!(encode(1.1875), 0x3A);
        // Subnormal halfway 0.5 * 2^-9 rounds to zero.
        assert_eq!(encode(1.0 / 1024.0), 0x00);
    }

    #[test]
    fn ceil_never_below() {
        for i in 1..5000 {
            let v = i as f64 * 0.0913;
            let v = v.min(MAX_FINITE);
            let b = encode_ceil(v);
            assert!(decode(b) >= v);
            if b > 0 {
                assert!(decode(b - 1) < v);
            }
        }
        assert_eq!(encode_ceil(1e-9), 0x01);
    }
}
