//! Saturating two's-complement fixed-point arithmetic.
//!
//! A format `fx<W>:<I>.<F>` has `W` total bits of which `I` are integer bits
//! (sign included) and `F = W - I` fraction bits. `fx10:3.7` covers
//! `[-4, 3.9921875]` in steps of `2^-7`. Every rounding step in this module is
//! round-to-nearest with ties away from zero, and every result saturates.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("width {0} outside 8..=32")]
    Width(u32),
    #[error("integer bits {int_bits} invalid for width {width}")]
    IntBits { width: u32, int_bits: u32 },
    #[error("cannot parse fixed-point format {0:?}, expected fx<W>:<I>.<F>")]
    Syntax(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxFormat {
    width: u8,
    int_bits: u8,
}

impl FxFormat {
    pub fn new(width: u32, int_bits: u32) -> Result<Self, FormatError> {
        if !(8..=32).contains(&width) {
            return Err(FormatError::Width(width));
        }
        if int_bits < 1 || int_bits > width {
            return Err(FormatError::IntBits { width, int_bits });
        }
        Ok(Self {
            width: width as u8,
            int_bits: int_bits as u8,
        })
    }

    /// Format with three integer bits, the split used for every width unless
    /// configured otherwise.
    pub fn with_width(width: u32) -> Result<Self, FormatError> {
        Self::new(width, 3)
    }

    pub fn width(self) -> u32 {
        self.width as u32
    }

    pub fn int_bits(self) -> u32 {
        self.int_bits as u32
    }

    pub fn frac_bits(self) -> u32 {
        (self.width - self.int_bits) as u32
    }

    pub fn min_raw(self) -> i64 {
        -(1i64 << (self.width() - 1))
    }

    pub fn max_raw(self) -> i64 {
        (1i64 << (self.width() - 1)) - 1
    }

    /// Grid step `2^-F`.
    pub fn step(self) -> f64 {
        (-(self.frac_bits() as f64)).exp2()
    }

    pub fn min_value(self) -> f64 {
        self.min_raw() as f64 * self.step()
    }

    pub fn max_value(self) -> f64 {
        self.max_raw() as f64 * self.step()
    }

    fn saturate(self, raw: i128) -> i32 {
        raw.clamp(self.min_raw() as i128, self.max_raw() as i128) as i32
    }
}

impl fmt::Display for FxFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "fx{}:{}.{}",
            self.width,
            self.int_bits,
            self.frac_bits()
        )
    }
}

impl FromStr for FxFormat {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let syntax = || FormatError::Syntax(s.to_string());
        let body = s.trim().strip_prefix("fx").ok_or_else(syntax)?;
        let (width, split) = body.split_once(':').ok_or_else(syntax)?;
        let (int_bits, frac_bits) = split.split_once('.').ok_or_else(syntax)?;
        let width: u32 = width.parse().map_err(|_| syntax())?;
        let int_bits: u32 = int_bits.parse().map_err(|_| syntax())?;
        let frac_bits: u32 = frac_bits.parse().map_err(|_| syntax())?;
        if int_bits + frac_bits != width {
            return Err(syntax());
        }
        Self::new(width, int_bits)
    }
}

/// A value on the grid of its format. `raw` always lies in the W-bit
/// two's-complement range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxValue {
    raw: i32,
    fmt: FxFormat,
}

impl FxValue {
    /// Wraps a raw integer, saturating it into range.
    pub fn from_raw(raw: i64, fmt: FxFormat) -> Self {
        Self {
            raw: fmt.saturate(raw as i128),
            fmt,
        }
    }

    pub fn zero(fmt: FxFormat) -> Self {
        Self { raw: 0, fmt }
    }

    pub fn one(fmt: FxFormat) -> Self {
        Self::from_raw(1i64 << fmt.frac_bits(), fmt)
    }

    pub fn raw(self) -> i32 {
        self.raw
    }

    pub fn format(self) -> FxFormat {
        self.fmt
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 * self.fmt.step()
    }
}

impl PartialOrd for FxValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        (self.fmt == other.fmt).then(|| self.raw.cmp(&other.raw))
    }
}

impl fmt::Display for FxValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}

/// Divides by `2^shift`, rounding to nearest with ties away from zero.
pub fn round_shift(value: i128, shift: u32) -> i128 {
    if shift == 0 {
        return value;
    }
    let half = 1i128 << (shift - 1);
    if value >= 0 {
        (value + half) >> shift
    } else {
        -((-value + half) >> shift)
    }
}

/// Nearest grid point to `x`, saturated. `x` must not be NaN.
pub fn quantize(x: f64, fmt: FxFormat) -> FxValue {
    debug_assert!(!x.is_nan(), "quantize(NaN)");
    // Scaling by a power of two is exact; f64::round breaks ties away from
    // zero.
    let scaled = (x * (fmt.frac_bits() as f64).exp2()).round();
    let raw = scaled.clamp(fmt.min_raw() as f64, fmt.max_raw() as f64);
    FxValue {
        raw: raw as i32,
        fmt,
    }
}

fn same_format(a: FxValue, b: FxValue) -> FxFormat {
    debug_assert_eq!(a.fmt, b.fmt, "fixed-point operands in different formats");
    a.fmt
}

pub fn fx_add(a: FxValue, b: FxValue) -> FxValue {
    let fmt = same_format(a, b);
    FxValue {
        raw: fmt.saturate(a.raw as i128 + b.raw as i128),
        fmt,
    }
}

pub fn fx_sub(a: FxValue, b: FxValue) -> FxValue {
    let fmt = same_format(a, b);
    FxValue {
        raw: fmt.saturate(a.raw as i128 - b.raw as i128),
        fmt,
    }
}

pub fn fx_mul(a: FxValue, b: FxValue) -> FxValue {
    let fmt = same_format(a, b);
    let product = a.raw as i128 * b.raw as i128;
    FxValue {
        raw: fmt.saturate(round_shift(product, fmt.frac_bits())),
        fmt,
    }
}

/// `acc + a*b` with the product rounded and the sum saturated separately.
pub fn fx_mac(acc: FxValue, a: FxValue, b: FxValue) -> FxValue {
    fx_add(acc, fx_mul(a, b))
}

/// Quantized logistic sigmoid, equivalent to a full-input lookup table.
pub fn sigmoid_fx(x: FxValue) -> FxValue {
    quantize(1.0 / (1.0 + (-x.to_f64()).exp()), x.fmt)
}

/// Sigmoid derivative recovered from a stored activation: `a * (1 - a)`.
pub fn sigmoid_deriv_from_act(a: FxValue) -> FxValue {
    fx_mul(a, fx_sub(FxValue::one(a.fmt), a))
}

/// Wide dot-product accumulator holding exact products with `2F` fraction
/// bits. Rounded and saturated once, by [`WideAcc::finish`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WideAcc(pub i128);

impl WideAcc {
    pub fn mac(self, a: FxValue, b: FxValue) -> Self {
        WideAcc(self.0 + a.raw as i128 * b.raw as i128)
    }

    /// Adds a single grid value (aligned to `2F` fraction bits).
    pub fn add(self, v: FxValue) -> Self {
        WideAcc(self.0 + ((v.raw as i128) << v.fmt.frac_bits()))
    }

    pub fn finish(self, fmt: FxFormat) -> FxValue {
        FxValue {
            raw: fmt.saturate(round_shift(self.0, fmt.frac_bits())),
            fmt,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fx10() -> FxFormat {
        "fx10:3.7".parse().unwrap()
    }

    #[test]
    fn format_parsing_and_range() {
        let f = fx10();
        assert_eq!((f.width(), f.int_bits(), f.frac_bits()), (10, 3, 7));
        assert_eq!(f.min_value(), -4.0);
        assert_eq!(f.max_value(), 3.9921875);
        assert_eq!(f.to_string(), "fx10:3.7");
        assert_eq!(FxFormat::with_width(16).unwrap().to_string(), "fx16:3.13");
        assert!("fx10:3.6".parse::<FxFormat>().is_err());
        assert!("fx40:3.37".parse::<FxFormat>().is_err());
        assert!("10:3.7".parse::<FxFormat>().is_err());
        assert!(FxFormat::new(10, 0).is_err());
    }

    #[test]
    fn quantize_examples() {
        let f = fx10();
        let half = quantize(0.5, f);
        assert_eq!(half.raw(), 64);
        assert_eq!(half.to_f64(), 0.5);
        assert_eq!(quantize(5.0, f).to_f64(), 511.0 / 128.0);
        assert_eq!(quantize(-9.0, f).to_f64(), -4.0);
        // -0.004 * 128 = -0.512 rounds to -1.
        let small = quantize(-0.004, f);
        assert_eq!(small.raw(), -1);
        assert_eq!(small.to_f64(), -0.0078125);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let f = fx10();
        assert_eq!(quantize(0.5 / 128.0, f).raw(), 1);
        assert_eq!(quantize(-0.5 / 128.0, f).raw(), -1);
        assert_eq!(quantize(1.5 / 128.0, f).raw(), 2);
        assert_eq!(round_shift(3, 1), 2);
        assert_eq!(round_shift(-3, 1), -2);
        assert_eq!(round_shift(5, 2), 1);
        assert_eq!(round_shift(-6, 2), -2);
    }

    #[test]
    fn arithmetic_examples() {
        let f = fx10();
        let q = |x| quantize(x, f);
        assert_eq!(fx_mul(q(0.5), q(0.5)).to_f64(), 0.25);
        assert_eq!(fx_add(q(3.9921875), q(1.0)).to_f64(), 3.9921875);
        assert_eq!(fx_sub(q(-4.0), q(1.0)).to_f64(), -4.0);
        let p = fx_mul(q(1.5), q(1.5));
        assert_eq!(p.to_f64(), 2.25);
        assert_eq!(p, quantize(1.5 * 1.5, f));
        assert_eq!(fx_mac(q(1.0), q(0.5), q(0.5)).to_f64(), 1.25);
    }

    #[test]
    fn sigmoid_examples() {
        let f = fx10();
        assert_eq!(sigmoid_fx(FxValue::zero(f)).to_f64(), 0.5);
        assert_eq!(sigmoid_deriv_from_act(quantize(0.5, f)).to_f64(), 0.25);
    }

    #[test]
    fn sigmoid_sweep_is_monotone_and_bounded() {
        let f = fx10();
        let lo = quantize(1.0 / (1.0 + 4f64.exp()), f);
        let hi = quantize(1.0 / (1.0 + (-3.9921875f64).exp()), f);
        let mut prev = None;
        for raw in f.min_raw()..=f.max_raw() {
            let y = sigmoid_fx(FxValue::from_raw(raw, f));
            assert!(y >= lo && y <= hi);
            if let Some(p) = prev {
                assert!(y >= p);
            }
            prev = Some(y);
        }
        assert_eq!(prev, Some(hi));
    }

    #[test]
    fn wide_accumulator_rounds_once() {
        let f = fx10();
        let q = |x| quantize(x, f);
        // 3 * (1/128 * 0.5) = 3/256: per-step rounding gives 3/128, the wide
        // sum gives 2/128 (1.5 rounds away to 2).
        let a = q(1.0 / 128.0);
        let b = q(0.5);
        let stepwise = (0..3).fold(FxValue::zero(f), |acc, _| fx_mac(acc, a, b));
        let wide = (0..3).fold(WideAcc::default(), |acc, _| acc.mac(a, b));
        assert_eq!(stepwise.raw(), 3);
        assert_eq!(wide.finish(f).raw(), 2);
        assert_eq!(WideAcc::default().add(q(1.25)).finish(f), q(1.25));
        // Saturates only at the end.
        let big = (0..8).fold(WideAcc::default(), |acc, _| acc.mac(q(3.0), q(3.0)));
        let back = (0..8).fold(big, |acc, _| acc.mac(q(-3.0), q(3.0)));
        assert_eq!(back.finish(f).raw(), 0);
    }
}
