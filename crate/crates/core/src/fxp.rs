//! Fixed-point arithmetic for the accelerator datapath.
//!
//! Values are two's-complement integers scaled by `2^-binary_point`.
//! Products are accumulated exactly in a 48-bit accumulator and only rounded
//! once, when the accumulator is requantized back to the datapath format.

use thiserror::Error;

use crate::archspec::{FixedFormat, Rounding};

/// Accumulator width in bits.
pub const ACC_BITS: u32 = 48;
pub const ACC_MIN: i64 = -(1i64 << (ACC_BITS - 1));
pub const ACC_MAX: i64 = (1i64 << (ACC_BITS - 1)) - 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FxpError {
    #[error("cannot convert NaN to fixed point")]
    NaN,
    #[error("accumulator overflow: {0} does not fit in {ACC_BITS} bits")]
    AccumulatorOverflow(i128),
    #[error("operand formats differ: {0} vs {1}")]
    FormatMismatch(FixedFormat, FixedFormat),
}

/// A fixed-point value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FxVal {
    pub raw: i64,
    pub fmt: FixedFormat,
}

impl FxVal {
    /// Builds a value from a raw integer, saturating into range.
    pub fn from_raw(raw: i64, fmt: FixedFormat) -> Self {
        FxVal {
            raw: saturate(raw, fmt),
            fmt,
        }
    }

    pub fn to_f64(self) -> f64 {
        from_fixed(self)
    }
}

pub fn saturate(raw: i64, fmt: FixedFormat) -> i64 {
    raw.clamp(fmt.raw_min(), fmt.raw_max())
}

/// `value >> shift` rounded per `rounding`.
pub fn shift_round(value: i128, shift: u32, rounding: Rounding) -> i128 {
    if shift == 0 {
        return value;
    }
    let floor = value >> shift;
    match rounding {
        Rounding::Truncate => floor,
        Rounding::RoundToNearestEven => {
            let rem = value - (floor << shift);
            let half = 1i128 << (shift - 1);
            if rem > half || (rem == half && floor & 1 == 1) {
                floor + 1
            } else {
                floor
            }
        }
    }
}

/// `value / divisor` rounded per `rounding`; `divisor` must be positive.
pub fn div_round(value: i128, divisor: i128, rounding: Rounding) -> i128 {
    assert!(divisor > 0, "divisor must be positive");
    let floor = value.div_euclid(divisor);
    match rounding {
        Rounding::Truncate => floor,
        Rounding::RoundToNearestEven => {
            let rem2 = 2 * value.rem_euclid(divisor);
            if rem2 > divisor || (rem2 == divisor && floor & 1 == 1) {
                floor + 1
            } else {
                floor
            }
        }
    }
}

/// Quantizes `x`: scale by `2^bp`, round per the format, then saturate.
pub fn to_fixed(x: f64, fmt: FixedFormat) -> Result<FxVal, FxpError> {
    if x.is_nan() {
        return Err(FxpError::NaN);
    }
    let scaled = x * fmt.binary_point_scale();
    let rounded = match fmt.rounding {
        Rounding::RoundToNearestEven => scaled.round_ties_even(),
        Rounding::Truncate => scaled.floor(),
    };
    let raw = rounded.clamp(fmt.raw_min() as f64, fmt.raw_max() as f64) as i64;
    Ok(FxVal { raw, fmt })
}

/// Exact real value of `v`.
pub fn from_fixed(v: FxVal) -> f64 {
    v.raw as f64 / v.fmt.binary_point_scale()
}

/// `acc + a*b` on raw integers, checked against the accumulator width.
pub fn mac(acc: i64, a: FxVal, b: FxVal) -> Result<i64, FxpError> {
    if a.fmt != b.fmt {
        return Err(FxpError::FormatMismatch(a.fmt, b.fmt));
    }
    check_acc(acc as i128 + a.raw as i128 * b.raw as i128)
}

pub fn check_acc(v: i128) -> Result<i64, FxpError> {
    if v < ACC_MIN as i128 || v > ACC_MAX as i128 {
        Err(FxpError::AccumulatorOverflow(v))
    } else {
        Ok(v as i64)
    }
}

/// Brings an accumulator holding raw products (`2*bp` fractional bits) back
/// to the datapath format.
pub fn requantize(acc: i64, fmt: FixedFormat) -> FxVal {
    let shifted = shift_round(acc as i128, fmt.binary_point, fmt.rounding);
    let raw = shifted.clamp(fmt.raw_min() as i128, fmt.raw_max() as i128) as i64;
    FxVal { raw, fmt }
}

/// Raw datapath value quantized from a float.
pub fn quantize_raw(x: f32, fmt: FixedFormat) -> Result<i64, FxpError> {
    to_fixed(f64::from(x), fmt).map(|v| v.raw)
}

impl FixedFormat {
    fn binary_point_scale(&self) -> f64 {
        (self.binary_point as f64).exp2()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const Q: FixedFormat = FixedFormat::q8_8();
    const QT: FixedFormat = FixedFormat {
        width_bits: 16,
        binary_point: 8,
        rounding: Rounding::Truncate,
    };

    fn fx(x: f64) -> FxVal {
        to_fixed(x, Q).unwrap()
    }

    #[test]
    fn to_fixed_examples() {
        assert_eq!(fx(1.0).raw, 256);
        assert_eq!(fx(200.0).raw, 32767);
        assert_eq!(fx(-200.0).raw, -32768);
        // -0.5 ulp: ties go to the even neighbour (0); floor gives -1.
        assert_eq!(fx(-0.001953125).raw, 0);
        assert_eq!(to_fixed(-0.001953125, QT).unwrap().raw, -1);
        // +1.5 ulp rounds up to the even 2; +0.5 ulp rounds down to 0.
        assert_eq!(fx(0.005859375).raw, 2);
        assert_eq!(fx(0.001953125).raw, 0);
        assert_eq!(to_fixed(f64::NAN, Q), Err(FxpError::NaN));
        assert_eq!(fx(f64::INFINITY).raw, 32767);
    }

    #[test]
    fn from_fixed_examples() {
        assert_eq!(from_fixed(FxVal { raw: 256, fmt: Q }), 1.0);
        assert_eq!(from_fixed(FxVal { raw: -32768, fmt: Q }), -128.0);
        assert_eq!(from_fixed(FxVal { raw: 1, fmt: Q }), 0.00390625);
    }

    #[test]
    fn mac_examples() {
        assert_eq!(mac(0, fx(1.0), fx(1.0)).unwrap(), 65536);
        assert_eq!(mac(65536, fx(-1.0), fx(1.0)).unwrap(), 0);
        let mut acc = 0;
        for _ in 0..1024 {
            acc = mac(acc, fx(1.0), fx(1.0)).unwrap();
        }
        assert_eq!(acc, 1024 * 65536);
        let out = requantize(acc, Q);
        assert_eq!(out.raw, 32767);
        assert!((from_fixed(out) - 127.99609375).abs() < 1e-12);
    }

    #[test]
    fn mac_overflow_is_reported() {
        let big = fx(127.0);
        assert!(matches!(
            mac(ACC_MAX - 10, big, big),
            Err(FxpError::AccumulatorOverflow(_))
        ));
        assert!(matches!(
            mac(0, fx(1.0), to_fixed(1.0, QT).unwrap()),
            Err(FxpError::FormatMismatch(..))
        ));
    }

    #[test]
    fn requantize_examples() {
        assert_eq!(requantize(65536, Q).raw, 256);
        assert_eq!(requantize(1 << 40, Q).raw, 32767);
        assert_eq!(requantize(-(1 << 40), Q).raw, -32768);
        // 384 / 256 = 1.5 -> 2 (even); 640 / 256 = 2.5 -> 2 (even).
        assert_eq!(requantize(384, Q).raw, 2);
        assert_eq!(requantize(640, Q).raw, 2);
        assert_eq!(requantize(384, QT).raw, 1);
        assert_eq!(requantize(-384, QT).raw, -2);
    }

    #[test]
    fn div_round_ties() {
        assert_eq!(div_round(5, 2, Rounding::RoundToNearestEven), 2);
        assert_eq!(div_round(7, 2, Rounding::RoundToNearestEven), 4);
        assert_eq!(div_round(-5, 2, Rounding::RoundToNearestEven), -2);
        assert_eq!(div_round(-5, 2, Rounding::Truncate), -3);
        assert_eq!(div_round(10, 3, Rounding::RoundToNearestEven), 3);
        assert_eq!(div_round(11, 3, Rounding::RoundToNearestEven), 4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};

        proptest! {
            #[test]
            fn round_trip_error_is_half_ulp(x in -127.99f64..127.99) {
                let back = from_fixed(to_fixed(x, Q).unwrap());
                prop_assert!((back - x).abs() <= Q.ulp() / 2.0);
            }

            #[test]
            fn to_fixed_is_monotone(a in -300.0f64..300.0, b in -300.0f64..300.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(to_fixed(lo, Q).unwrap().raw <= to_fixed(hi, Q).unwrap().raw);
                prop_assert!(to_fixed(lo, QT).unwrap().raw <= to_fixed(hi, QT).unwrap().raw);
            }

            #[test]
            fn saturation_is_idempotent(x in -1e6f64..1e6) {
                for fmt in [Q, QT] {
                    let once = to_fixed(x, fmt).unwrap();
                    let twice = to_fixed(from_fixed(once), fmt).unwrap();
                    prop_assert_eq!(once, twice);
                }
            }

            #[test]
            fn representable_values_round_trip(raw in -32768i64..=32767) {
                let v = FxVal { raw, fmt: Q };
                prop_assert_eq!(to_fixed(from_fixed(v), Q).unwrap(), v);
            }

            #[test]
            fn dot_product_error_bound(seed in any::<u64>(), k in 1usize..=1024) {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let a: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let b: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let exact: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                let mut acc = 0i64;
                for (x, y) in a.iter().zip(&b) {
                    acc = mac(acc, fx(*x), fx(*y)).unwrap();
                }
                let got = from_fixed(requantize(acc, Q));
                let bound = k as f64 * Q.ulp() + Q.ulp() / 2.0;
                // out-of-range results saturate, so skip them
                if exact.abs() < 127.0 {
                    prop_assert!((got - exact).abs() <= bound, "k={} err={}", k, (got - exact).abs());
                }
            }
        }
    }
}
