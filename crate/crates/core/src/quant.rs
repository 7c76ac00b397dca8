//! Integer-only fixed-point arithmetic.
//!
//! A real scalar `m` in (0, 1) is encoded as a 32-bit unsigned multiplier and a
//! right shift so that `m ≈ mult · 2^-shift`, with `mult` normalised into
//! `[2^31, 2^32)`. Every rescaling of a 32-bit accumulator goes through
//! [`MultShift::apply`], which multiplies in 64 bits and then shifts with the
//! selected [`Rounding`].

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// How the final right shift of a requantization is rounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Rounding {
    /// Add half an LSB before shifting; ties go away from zero.
    #[default]
    Nearest,
    /// Plain arithmetic shift (floor).
    Truncate,
}

impl Rounding {
    pub fn as_str(self) -> &'static str {
        match self {
            Rounding::Nearest => "nearest",
            Rounding::Truncate => "truncate",
        }
    }
}

impl core::str::FromStr for Rounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Rounding::Nearest),
            "truncate" => Ok(Rounding::Truncate),
            other => Err(Error::Domain(format!("unknown rounding mode `{other}`"))),
        }
    }
}

/// Fixed-point representation `mult · 2^-shift` of a real scalar in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MultShift {
    pub mult: u32,
    pub shift: u8,
}

/// Smallest multiplier the normalised encoding can hold.
pub const MULT_MIN: u32 = 1 << 31;

impl MultShift {
    /// Builds a pair from raw parts, checking the normalisation invariants.
    pub fn from_parts(mult: u32, shift: u8) -> Result<Self> {
        if mult < MULT_MIN || shift < 32 {
            return Err(Error::Domain(format!(
                "multiplier ({mult}, {shift}) is not normalised: need mult >= 2^31 and shift >= 32"
            )));
        }
        Ok(MultShift { mult, shift })
    }

    /// The real value this pair represents.
    pub fn value(&self) -> f64 {
        libm::ldexp(self.mult as f64, -(self.shift as i32))
    }

    /// `(x · mult) >> shift` with a 64-bit product.
    pub fn apply(&self, x: i32, rounding: Rounding) -> i32 {
        let product = x as i64 * self.mult as i64;
        // |x| < 2^31 and mult < 2^32 bound the result by |x|.
        rounding_shift(product, self.shift, rounding) as i32
    }
}

/// Arithmetic right shift of `v` by `shift` bits with the given rounding.
///
/// Shifts of 64 or more are well defined: truncation yields 0 or -1 and
/// round-to-nearest yields 0 because `|v| < 2^63`.
pub fn rounding_shift(v: i64, shift: u8, rounding: Rounding) -> i64 {
    if shift == 0 {
        return v;
    }
    if shift >= 64 {
        return match rounding {
            Rounding::Truncate if v < 0 => -1,
            _ => 0,
        };
    }
    match rounding {
        Rounding::Truncate => v >> shift,
        Rounding::Nearest => {
            let half = 1i128 << (shift - 1);
            let wide = v as i128;
            let magnitude = (wide.abs() + half) >> shift;
            (if v < 0 { -magnitude } else { magnitude }) as i64
        }
    }
}

/// Converts a real scalar `m` in (0, 1) into its [`MultShift`] equivalent by
/// doubling it into `[0.5, 1)` and scaling by `2^32`.
pub fn quantize_multiplier(m: f64, rounding: Rounding) -> Result<MultShift> {
    if !m.is_finite() || m <= 0.0 || m >= 1.0 {
        return Err(Error::Domain(format!("multiplier {m} is outside (0, 1)")));
    }
    let mut frac = m;
    let mut doublings: u32 = 0;
    while frac < 0.5 {
        frac *= 2.0;
        doublings += 1;
    }
    // frac·2^32 is exact in f64: it only moves the exponent.
    let scaled = libm::ldexp(frac, 32);
    let mut mult = match rounding {
        Rounding::Truncate => libm::floor(scaled),
        Rounding::Nearest => libm::round(scaled),
    } as u64;
    if mult == 1 << 32 {
        if doublings == 0 {
            mult = u32::MAX as u64;
        } else {
            mult = 1 << 31;
            doublings -= 1;
        }
    }
    let shift = 32 + doublings;
    if shift > u8::MAX as u32 {
        return Err(Error::Domain(format!("multiplier {m} needs a shift of {shift}, beyond the 8-bit encoding")));
    }
    Ok(MultShift { mult: mult as u32, shift: shift as u8 })
}

/// Per-channel output conversion: multiplier, output zero point and clamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RequantParams {
    pub ms: MultShift,
    pub out_zero: i32,
    pub out_min: i32,
    pub out_max: i32,
}

impl RequantParams {
    pub fn new(ms: MultShift, out_zero: i32, out_min: i32, out_max: i32) -> Result<Self> {
        if !(out_min <= out_zero && out_zero <= out_max) {
            return Err(Error::Domain(format!("zero point {out_zero} outside clamp range [{out_min}, {out_max}]")));
        }
        Ok(RequantParams { ms, out_zero, out_min, out_max })
    }

    /// Parameters for an unsigned 8-bit output.
    pub fn u8(ms: MultShift, out_zero: u8) -> Self {
        RequantParams { ms, out_zero: out_zero as i32, out_min: 0, out_max: 255 }
    }

    /// Requantize and clamp an accumulator into the output range.
    pub fn output(&self, acc: i32, rounding: Rounding) -> i32 {
        let v = requantize(acc, self, rounding);
        v.clamp(self.out_min, self.out_max)
    }

    /// [`RequantParams::output`] narrowed to a byte; valid for 8-bit ranges.
    pub fn output_u8(&self, acc: i32, rounding: Rounding) -> u8 {
        self.output(acc, rounding) as u8
    }
}

/// `((acc · mult) >> shift) + out_zero`, before clamping.
pub fn requantize(acc: i32, p: &RequantParams, rounding: Rounding) -> i32 {
    p.ms.apply(acc, rounding) + p.out_zero
}

/// `min(max(v, lo), hi)`.
pub fn clamp(v: i32, lo: i32, hi: i32) -> Result<i32> {
    if lo > hi {
        return Err(Error::Domain(format!("empty clamp range [{lo}, {hi}]")));
    }
    Ok(v.clamp(lo, hi))
}

/// Batch-normalisation parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub epsilon: f64,
}

/// Default epsilon used by the model generator.
pub const DEFAULT_BN_EPSILON: f64 = 1e-3;

/// Folds batch normalisation into the preceding convolution.
///
/// `weights` is laid out output-channel major: each of the `bias.len()`
/// output channels owns a contiguous run of `weights.len() / bias.len()`
/// values.
pub fn fold_batch_norm(weights: &[f64], bias: &[f64], bn: &BatchNormParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let channels = bias.len();
    if channels == 0
        || bn.gamma.len() != channels
        || bn.beta.len() != channels
        || bn.mean.len() != channels
        || bn.variance.len() != channels
    {
        return Err(Error::Domain(format!(
            "batch-norm vectors ({}, {}, {}, {}) do not match {channels} output channels",
            bn.gamma.len(),
            bn.beta.len(),
            bn.mean.len(),
            bn.variance.len()
        )));
    }
    if !weights.len().is_multiple_of(channels) {
        return Err(Error::Domain(format!("{} weights do not split into {channels} output channels", weights.len())));
    }
    let per_channel = weights.len() / channels;
    let mut folded_w = Vec::with_capacity(weights.len());
    let mut folded_b = Vec::with_capacity(channels);
    for c in 0..channels {
        let denom = bn.variance[c] + bn.epsilon;
        if denom.is_nan() || denom <= 0.0 {
            return Err(Error::Domain(format!("channel {c}: variance + epsilon = {denom} is not positive")));
        }
        let factor = bn.gamma[c] / libm::sqrt(denom);
        folded_w.extend(weights[c * per_channel..(c + 1) * per_channel].iter().map(|w| w * factor));
        folded_b.push((bias[c] - bn.mean[c]) * factor + bn.beta[c]);
    }
    Ok((folded_w, folded_b))
}

/// Storage width of a narrowed bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BiasWidth {
    Bits16,
    Bits18,
}

impl BiasWidth {
    pub fn bits(self) -> u32 {
        match self {
            BiasWidth::Bits16 => 16,
            BiasWidth::Bits18 => 18,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(BiasWidth::Bits16),
            18 => Ok(BiasWidth::Bits18),
            other => Err(Error::Domain(format!("unsupported bias width {other}"))),
        }
    }

    pub fn min(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    pub fn max(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }
}

/// A bias that has been checked to fit a narrow signed width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NarrowBias {
    value: i32,
    width: BiasWidth,
}

impl NarrowBias {
    pub fn width(&self) -> BiasWidth {
        self.width
    }

    /// Sign-extends back to 32 bits.
    pub fn widen(&self) -> i32 {
        self.value
    }

    /// The two's-complement bit pattern in the low `width` bits.
    pub fn raw_bits(&self) -> u32 {
        (self.value as u32) & ((1u32 << self.width.bits()) - 1)
    }

    /// Rebuilds a bias from its low `width` bits.
    pub fn from_raw_bits(raw: u32, width: BiasWidth) -> Self {
        let unused = 32 - width.bits();
        NarrowBias { value: ((raw << unused) as i32) >> unused, width }
    }
}

/// Narrows a 32-bit bias to 16 or 18 bits, rejecting values that do not fit.
pub fn narrow_bias(b: i32, width: BiasWidth) -> Result<NarrowBias> {
    if b < width.min() || b > width.max() {
        return Err(Error::Range(format!("bias {b} does not fit in {} signed bits", width.bits())));
    }
    Ok(NarrowBias { value: b, width })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn multiplier_examples() {
        for rounding in [Rounding::Nearest, Rounding::Truncate] {
            assert_eq!(quantize_multiplier(0.5, rounding).unwrap(), MultShift { mult: 2147483648, shift: 32 });
            assert_eq!(quantize_multiplier(1.0 / 256.0, rounding).unwrap(), MultShift { mult: 2147483648, shift: 39 });
            assert_eq!(quantize_multiplier(0.375, rounding).unwrap(), MultShift { mult: 3221225472, shift: 33 });
        }
    }

    #[test]
    fn multiplier_domain() {
        for m in [0.0, -0.25, 1.0, 1.5, f64::NAN, f64::INFINITY] {
            assert!(matches!(quantize_multiplier(m, Rounding::Nearest), Err(Error::Domain(_))));
        }
        // 2^-230 needs 229 doublings: shift 261.
        assert!(quantize_multiplier(libm::ldexp(1.0, -230), Rounding::Nearest).is_err());
        let tiny = quantize_multiplier(libm::ldexp(1.0, -200), Rounding::Nearest).unwrap();
        assert_eq!(tiny.shift, 231);
    }

    #[test]
    fn multiplier_rounding_up_to_next_power() {
        let m = 0.5 - libm::ldexp(1.0, -40);
        let ms = quantize_multiplier(m, Rounding::Nearest).unwrap();
        assert_eq!(ms, MultShift { mult: 1 << 31, shift: 32 });
        let ms = quantize_multiplier(m, Rounding::Truncate).unwrap();
        assert_eq!(ms, MultShift { mult: u32::MAX, shift: 33 });
        let ms = quantize_multiplier(1.0 - libm::ldexp(1.0, -40), Rounding::Nearest).unwrap();
        assert_eq!(ms, MultShift { mult: u32::MAX, shift: 32 });
    }

    #[test]
    fn requantize_examples() {
        let half = RequantParams::u8(quantize_multiplier(0.5, Rounding::Nearest).unwrap(), 0);
        assert_eq!(requantize(100, &half, Rounding::Nearest), 50);
        assert_eq!(requantize(100, &half, Rounding::Truncate), 50);

        let zp = RequantParams::u8(half.ms, 12);
        assert_eq!(requantize(0, &zp, Rounding::Nearest), 12);

        let p = RequantParams::u8(MultShift { mult: 3221225472, shift: 33 }, 0);
        assert_eq!(requantize(255, &p, Rounding::Truncate), 95);
        assert_eq!(requantize(255, &p, Rounding::Nearest), 96);
    }

    #[test]
    fn rounding_ties_and_signs() {
        // 3 * 0.5 = 1.5, -3 * 0.5 = -1.5
        assert_eq!(rounding_shift(3, 1, Rounding::Nearest), 2);
        assert_eq!(rounding_shift(-3, 1, Rounding::Nearest), -2);
        assert_eq!(rounding_shift(-3, 1, Rounding::Truncate), -2);
        assert_eq!(rounding_shift(-1, 1, Rounding::Truncate), -1);
        assert_eq!(rounding_shift(5, 0, Rounding::Nearest), 5);
        assert_eq!(rounding_shift(i64::MAX, 64, Rounding::Nearest), 0);
        assert_eq!(rounding_shift(-7, 200, Rounding::Truncate), -1);
        assert_eq!(rounding_shift(i64::MAX, 63, Rounding::Nearest), 1);
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp(-5, 0, 255), Ok(0));
        assert_eq!(clamp(300, 0, 255), Ok(255));
        assert_eq!(clamp(128, 0, 255), Ok(128));
        assert!(matches!(clamp(1, 5, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn requant_params_validation() {
        let ms = MultShift { mult: 1 << 31, shift: 32 };
        assert!(RequantParams::new(ms, 300, 0, 255).is_err());
        assert!(RequantParams::new(ms, 0, 0, 255).is_ok());
        assert!(MultShift::from_parts(1 << 30, 40).is_err());
        assert!(MultShift::from_parts(1 << 31, 31).is_err());
    }

    #[test]
    fn narrow_bias_examples() {
        assert_eq!(narrow_bias(32767, BiasWidth::Bits16).unwrap().widen(), 32767);
        assert!(matches!(narrow_bias(32768, BiasWidth::Bits16), Err(Error::Range(_))));
        assert_eq!(narrow_bias(131071, BiasWidth::Bits18).unwrap().widen(), 131071);
        assert!(narrow_bias(-131072, BiasWidth::Bits18).is_ok());
        assert!(narrow_bias(-131073, BiasWidth::Bits18).is_err());
        assert!(BiasWidth::from_bits(17).is_err());
    }

    fn bn(gamma: f64, var: f64) -> BatchNormParams {
        BatchNormParams {
            gamma: alloc::vec![gamma; 2],
            beta: alloc::vec![0.0; 2],
            mean: alloc::vec![0.0; 2],
            variance: alloc::vec![var; 2],
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    #[test]
    fn fold_identity_and_scale() {
        let w = [0.5, -1.0, 2.0, 0.25];
        let b = [0.1, -0.3];
        let (fw, fb) = fold_batch_norm(&w, &b, &bn(1.0, 1.0 - DEFAULT_BN_EPSILON)).unwrap();
        for (x, y) in fw.iter().zip(&w) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in fb.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let (fw, fb) = fold_batch_norm(&w, &b, &bn(2.0, 1.0 - DEFAULT_BN_EPSILON)).unwrap();
        for (x, y) in fw.iter().zip(&w) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
        for (x, y) in fb.iter().zip(&b) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn fold_errors() {
        let w = [1.0; 4];
        assert!(fold_batch_norm(&w, &[0.0; 3], &bn(1.0, 1.0)).is_err());
        let mut p = bn(1.0, 1.0);
        p.variance[1] = -1.0;
        assert!(matches!(fold_batch_norm(&w, &[0.0; 2], &p), Err(Error::Domain(_))));
        assert!(fold_batch_norm(&[1.0; 3], &[0.0; 2], &bn(1.0, 1.0)).is_err());
    }

    proptest! {
        #[test]
        fn multiplier_is_monotone(a in 1e-7f64..0.999_999, b in 1e-7f64..0.999_999) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for rounding in [Rounding::Nearest, Rounding::Truncate] {
                let x = quantize_multiplier(lo, rounding).unwrap();
                let y = quantize_multiplier(hi, rounding).unwrap();
                prop_assert!(x.value() <= y.value());
            }
        }

        #[test]
        fn multiplier_relative_error(m in 1e-7f64..0.999_999) {
            for rounding in [Rounding::Nearest, Rounding::Truncate] {
                let ms = quantize_multiplier(m, rounding).unwrap();
                prop_assert!(ms.mult >= MULT_MIN);
                prop_assert!(ms.shift >= 32);
                prop_assert!(((ms.value() - m) / m).abs() <= libm::ldexp(1.0, -31));
            }
        }

        #[test]
        fn zero_accumulator_gives_zero_point(mult in MULT_MIN..=u32::MAX, shift in 32u8..=255, zero in 0i32..=255) {
            let p = RequantParams::u8(MultShift { mult, shift }, zero as u8);
            prop_assert_eq!(requantize(0, &p, Rounding::Nearest), zero);
            prop_assert_eq!(requantize(0, &p, Rounding::Truncate), zero);
        }

        #[test]
        fn narrow_bias_round_trips(b in any::<i32>(), wide in any::<bool>()) {
            let width = if wide { BiasWidth::Bits18 } else { BiasWidth::Bits16 };
            if let Ok(n) = narrow_bias(b, width) {
                prop_assert_eq!(n.widen(), b);
                prop_assert_eq!(NarrowBias::from_raw_bits(n.raw_bits(), width), n);
            }
        }
    }
}
