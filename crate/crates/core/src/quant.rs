//! Power-of-two fixed-point quantizer.
//!
//! A [`QuantSpec`] with `bits = b` and radix offset `l` represents the grid
//! `k * 2^l` for integer codes `k` in `[0, 2^b - 1]` (unsigned) or the
//! symmetric range `[-(2^(b-1) - 1), 2^(b-1) - 1]` (signed). Rounding is to
//! nearest with ties away from zero.

use alloc::format;
use alloc::string::String;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default clip multiple of the weight standard deviation.
pub const DEFAULT_WEIGHT_CLIP: f64 = 4.12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    /// Exponent of the least significant bit: the grid step is `2^radix`.
    pub radix: i32,
    pub signed: bool,
}

impl QuantSpec {
    pub fn signed(bits: u32, radix: i32) -> Self {
        Self {
            bits,
            radix,
            signed: true,
        }
    }

    pub fn unsigned(bits: u32, radix: i32) -> Self {
        Self {
            bits,
            radix,
            signed: false,
        }
    }

    pub fn step(&self) -> f64 {
        pow2(self.radix)
    }

    pub fn max_code(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    pub fn min_code(&self) -> i64 {
        if self.signed {
            -self.max_code()
        } else {
            0
        }
    }

    pub fn max_value(&self) -> f64 {
        self.max_code() as f64 * self.step()
    }

    pub fn min_value(&self) -> f64 {
        self.min_code() as f64 * self.step()
    }

    /// Integer code of `x`: `clamp(round(x * 2^-l))`.
    pub fn code(&self, x: f64) -> i64 {
        let k = Float::round(x * pow2(-self.radix));
        let k = k.clamp(self.min_code() as f64, self.max_code() as f64);
        k as i64
    }

    /// Quantizes one scalar.
    #[inline]
    pub fn apply<T: Scalar>(&self, x: T) -> T {
        let k = (x * T::from_f64(pow2(-self.radix))).round();
        let k = k
            .max(T::from_f64(self.min_code() as f64))
            .min(T::from_f64(self.max_code() as f64));
        k * T::from_f64(self.step())
    }

    /// Whether `x` is exactly a grid value inside the representable range.
    pub fn contains(&self, x: f64) -> bool {
        let k = x * pow2(-self.radix);
        k == Float::round(k) && k >= self.min_code() as f64 && k <= self.max_code() as f64
    }

    fn validate(&self) -> Result<()> {
        if self.bits < 2 || self.bits > 32 {
            return Err(Error::InvalidArgument(format!("unsupported bit width {}", self.bits)));
        }
        Ok(())
    }
}

/// Unsigned activation quantizer: clip to `[0, clip]`, then round onto `spec`.
///
/// For calibrated layers `clip = 2^(radix + bits)`, so the clamp inside the
/// spec already implies the ceiling. The uncalibrated control uses a
/// ceiling below the top of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub spec: QuantSpec,
    pub clip: f64,
}

impl ActQuant {
    #[inline]
    pub fn apply<T: Scalar>(&self, x: T) -> T {
        self.spec.apply(x.max(T::zero()).min(T::from_f64(self.clip)))
    }

    /// Largest code the quantizer emits.
    pub fn max_code(&self) -> i64 {
        self.spec.max_code().min(self.spec.code(self.clip))
    }

    pub fn max_value(&self) -> f64 {
        self.max_code() as f64 * self.spec.step()
    }

    /// Whether `x` is a possible output of [`ActQuant::apply`].
    pub fn contains(&self, x: f64) -> bool {
        self.spec.contains(x) && x >= 0.0 && x <= self.max_value()
    }
}

#[inline]
pub fn pow2(e: i32) -> f64 {
    Float::powi(2f64, e)
}

/// Quantizes a scalar, rejecting non-finite input.
pub fn quantize(x: f64, spec: QuantSpec) -> Result<f64> {
    spec.validate()?;
    if !x.is_finite() {
        return Err(Error::NonFinite {
            tensor: String::from("scalar"),
            index: 0,
        });
    }
    Ok(spec.apply(x))
}

/// Element-wise quantization of a tensor; `name` identifies it in errors.
pub fn quantize_tensor<T: Scalar>(x: &Tensor<T>, spec: QuantSpec, name: &str) -> Result<Tensor<T>> {
    spec.validate()?;
    x.check_finite(name)?;
    Ok(x.map(|v| spec.apply(v)))
}

/// Outcome of [`weight_radix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightRadix {
    pub radix: i32,
    /// The tensor had zero variance and the fixed-rule fallback was used.
    pub degenerate: bool,
}

/// Population standard deviation, accumulated in `f64`.
pub fn population_std<T: Scalar>(values: &[T]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Float::sqrt(var)
}

/// Radix offset for a weight tensor: the range `±clip_mult * std(w)` split
/// into `2^bits - 2` bins gives the step `Δ`, and `l = ceil(log2(Δ))`.
pub fn weight_radix<T: Scalar>(w: &[T], bits: u32, clip_mult: f64) -> Result<WeightRadix> {
    if w.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "weight radix needs at least 2 elements, got {}",
            w.len()
        )));
    }
    if !(2..=31).contains(&bits) {
        return Err(Error::InvalidArgument(format!("unsupported weight bit width {bits}")));
    }
    if !(clip_mult > 0.0 && clip_mult.is_finite()) {
        return Err(Error::InvalidArgument(format!("clip multiple must be positive, got {clip_mult}")));
    }
    let std = population_std(w);
    if !std.is_finite() {
        return Err(Error::NonFinite {
            tensor: String::from("weight"),
            index: w.iter().position(|v| !v.is_finite()).unwrap_or(0),
        });
    }
    if std == 0.0 {
        return Ok(WeightRadix {
            radix: -(bits as i32) / 2,
            degenerate: true,
        });
    }
    let bins = ((1u64 << bits) - 2) as f64;
    let delta = 2.0 * clip_mult * std / bins;
    Ok(WeightRadix {
        radix: ceil_log2(delta),
        degenerate: false,
    })
}

/// The fixed rule `l = -b/2` for parameters other than weights.
pub fn fixed_param_radix(bits: u32) -> Result<i32> {
    if bits == 0 || bits % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "fixed radix rule needs an even bit width, got {bits}"
        )));
    }
    Ok(-(bits as i32) / 2)
}

/// Smallest integer `k` with `2^k >= y`, exact for powers of two.
pub fn ceil_log2(y: f64) -> i32 {
    debug_assert!(y > 0.0);
    let mut k = Float::ceil(Float::log2(y)) as i32;
    while pow2(k) < y {
        k += 1;
    }
    while pow2(k - 1) >= y {
        k -= 1;
    }
    k
}

/// Exponent `k` of [`round_up_even_pow2`].
pub fn even_pow2_exponent(y: f64) -> Result<i32> {
    if !(y > 0.0 && y.is_finite()) {
        return Err(Error::InvalidArgument(format!("expected a positive value, got {y}")));
    }
    let k = ceil_log2(y);
    Ok(if k % 2 == 0 { k } else { k + 1 })
}

/// `2^k` for the smallest even `k` with `2^k >= y`.
pub fn round_up_even_pow2(y: f64) -> Result<f64> {
    Ok(pow2(even_pow2_exponent(y)?))
}

/// `log2(y)` when `y` is an exact power of two.
pub fn exact_log2(y: f64) -> Option<i32> {
    if !(y > 0.0 && y.is_finite()) {
        return None;
    }
    let k = ceil_log2(y);
    (pow2(k) == y).then_some(k)
}

/// Radix for an unsigned activation clipped at `y_max = 2^p`: `l = p - bits`.
pub fn activation_radix(y_max: f64, bits: u32) -> Result<i32> {
    match exact_log2(y_max) {
        Some(p) => Ok(p - bits as i32),
        None => Err(Error::InvalidArgument(format!("y_max {y_max} is not a power of two"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn formula_examples() {
        let s4 = QuantSpec::signed(4, -2);
        let u4 = QuantSpec::unsigned(4, -2);
        assert_eq!(quantize(0.0, s4).unwrap(), 0.0);
        assert_eq!(quantize(0.0, QuantSpec::unsigned(8, -5)).unwrap(), 0.0);
        assert_eq!(quantize(0.3, s4).unwrap(), 0.25);
        assert_eq!(quantize(10.0, s4).unwrap(), 1.75);
        assert_eq!(quantize(-10.0, s4).unwrap(), -1.75);
        assert_eq!(quantize(10.0, u4).unwrap(), 3.75);
        assert_eq!(quantize(-1.0, u4).unwrap(), 0.0);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let s = QuantSpec::signed(8, -1);
        assert_eq!(quantize(0.25, s).unwrap(), 0.5);
        assert_eq!(quantize(-0.25, s).unwrap(), -0.5);
        assert_eq!(quantize(0.75, s).unwrap(), 1.0);
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(quantize(f64::NAN, QuantSpec::signed(4, 0)).is_err());
        let t = Tensor::<f64>::from_f64([3], &[0.0, 1.0, f64::INFINITY]).unwrap();
        assert_eq!(
            quantize_tensor(&t, QuantSpec::signed(4, 0), "conv1.weight"),
            Err(Error::NonFinite {
                tensor: "conv1.weight".into(),
                index: 2
            })
        );
    }

    #[test]
    fn ranges() {
        let s = QuantSpec::signed(4, -2);
        assert_eq!((s.min_value(), s.max_value()), (-1.75, 1.75));
        let u = QuantSpec::unsigned(4, -2);
        assert_eq!((u.min_value(), u.max_value()), (0.0, 3.75));
        assert_eq!(s.step(), 0.25);
    }

    #[test]
    fn weight_radix_unit_std() {
        // std = 1 exactly: values ±1
        let w: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = weight_radix(&w, 4, 4.12).unwrap();
        // Δ = 8.24 / 14 ≈ 0.5886, log2 Δ ≈ -0.765
        assert_eq!(r, WeightRadix { radix: 0, degenerate: false });
        let r8 = weight_radix(&w, 8, 4.12).unwrap();
        // Δ = 8.24 / 254 ≈ 0.03244 -> log2 ≈ -4.946
        assert_eq!(r8.radix, -4);
    }

    #[test]
    fn weight_radix_degenerate_and_invalid() {
        let r = weight_radix(&[0.5f64; 10], 4, 4.12).unwrap();
        assert_eq!(r, WeightRadix { radix: -2, degenerate: true });
        assert!(weight_radix(&[1.0f64], 4, 4.12).is_err());
        assert!(weight_radix(&[1.0f64, 2.0], 1, 4.12).is_err());
        assert!(weight_radix(&[1.0f64, 2.0], 4, 0.0).is_err());
    }

    #[test]
    fn fixed_rule() {
        assert_eq!(fixed_param_radix(8).unwrap(), -4);
        assert_eq!(fixed_param_radix(4).unwrap(), -2);
        assert_eq!(fixed_param_radix(2).unwrap(), -1);
        assert_eq!(fixed_param_radix(32).unwrap(), -16);
        assert!(fixed_param_radix(5).is_err());
    }

    #[test]
    fn even_power_of_two_rounding() {
        assert_eq!(round_up_even_pow2(5.2).unwrap(), 16.0);
        assert_eq!(round_up_even_pow2(4.0).unwrap(), 4.0);
        assert_eq!(round_up_even_pow2(0.3).unwrap(), 1.0);
        assert_eq!(round_up_even_pow2(1.0).unwrap(), 1.0);
        assert_eq!(round_up_even_pow2(0.2).unwrap(), 0.25);
        assert!(round_up_even_pow2(0.0).is_err());
        assert!(round_up_even_pow2(-3.0).is_err());
    }

    #[test]
    fn activation_radix_examples() {
        assert_eq!(activation_radix(16.0, 8).unwrap(), -4);
        assert_eq!(QuantSpec::unsigned(8, -4).max_value(), 15.9375);
        assert_eq!(activation_radix(4.0, 4).unwrap(), -2);
        assert_eq!(QuantSpec::unsigned(4, -2).max_value(), 3.75);
        for p in [2u32, 4, 8] {
            // y_max = 2^(p/2) lands on the fixed rule l = -p/2
            assert_eq!(
                activation_radix(pow2(p as i32 / 2), p).unwrap(),
                fixed_param_radix(p).unwrap()
            );
        }
        assert!(activation_radix(5.0, 8).is_err());
    }

    fn spec_strategy() -> impl Strategy<Value = QuantSpec> {
        (prop::sample::select(alloc::vec![2u32, 4, 8]), -10i32..4, any::<bool>())
            .prop_map(|(bits, radix, signed)| QuantSpec { bits, radix, signed })
    }

    proptest! {
        #[test]
        fn scaling_weights_by_two_bumps_radix(
            w in prop::collection::vec(-3.0f64..3.0, 2..64),
            bits in prop::sample::select(alloc::vec![2u32, 4, 8]),
        ) {
            let a = weight_radix(&w, bits, 4.12).unwrap();
            prop_assume!(!a.degenerate);
            let w2: Vec<f64> = w.iter().map(|v| v * 2.0).collect();
            let b = weight_radix(&w2, bits, 4.12).unwrap();
            prop_assert_eq!(b.radix, a.radix + 1);
        }

        #[test]
        fn quantizer_laws(x in -1.0e3f64..1.0e3, y in -1.0e3f64..1.0e3, spec in spec_strategy()) {
            let q = spec.apply(x);
            prop_assert_eq!(spec.apply(q), q);
            prop_assert!(q.abs() <= spec.max_value());
            prop_assert!(spec.contains(q));
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(spec.apply(lo) <= spec.apply(hi));
            if x >= spec.min_value() && x <= spec.max_value() {
                prop_assert!((q - x).abs() <= spec.step() / 2.0);
            }
        }
    }
}
