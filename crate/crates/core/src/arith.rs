//! Number systems the engine can run in: plain `f64` or a saturating
//! fixed-point format. Both expose the same handful of operations the
//! junction kernels need, including a wide accumulator that is rounded once
//! per neuron.

use std::fmt::Debug;

use crate::fixedpoint::{
    quantize, round_shift, sigmoid_deriv_from_act, sigmoid_fx, FxFormat, FxValue, WideAcc,
};

pub trait Arith: Clone + Debug + Send + Sync {
    type Value: Copy + PartialEq + Debug + Send + Sync;
    type Acc: Copy + Debug;

    fn zero(&self) -> Self::Value;
    fn from_real(&self, x: f64) -> Self::Value;
    fn to_real(&self, v: Self::Value) -> f64;

    fn acc_zero(&self) -> Self::Acc;
    /// `acc + a * b`, exact.
    fn acc_mac(&self, acc: Self::Acc, a: Self::Value, b: Self::Value) -> Self::Acc;
    fn acc_add(&self, acc: Self::Acc, v: Self::Value) -> Self::Acc;
    fn acc_finish(&self, acc: Self::Acc) -> Self::Value;

    fn mul(&self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn sigmoid(&self, x: Self::Value) -> Self::Value;
    /// `a * (1 - a)` from a stored activation.
    fn sigmoid_deriv(&self, a: Self::Value) -> Self::Value;
    /// `(a - target) * deriv`, the quadratic-cost output delta.
    fn output_delta(&self, a: Self::Value, target: Self::Value, deriv: Self::Value) -> Self::Value;
    /// `w - lr * delta * act`.
    fn sgd(&self, w: Self::Value, lr: Self::Value, delta: Self::Value, act: Self::Value) -> Self::Value;
    /// `b - lr * delta`.
    fn sgd_bias(&self, b: Self::Value, lr: Self::Value, delta: Self::Value) -> Self::Value;

    /// `f64` or the fixed-point format string.
    fn label(&self) -> String;
    /// Lossless text encoding for checkpoints.
    fn encode(&self, v: Self::Value) -> String;
    fn decode(&self, s: &str) -> Option<Self::Value>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Real;

impl Arith for Real {
    type Value = f64;
    type Acc = f64;

    fn zero(&self) -> f64 {
        0.0
    }

    fn from_real(&self, x: f64) -> f64 {
        x
    }

    fn to_real(&self, v: f64) -> f64 {
        v
    }

    fn acc_zero(&self) -> f64 {
        0.0
    }

    #[inline]
    fn acc_mac(&self, acc: f64, a: f64, b: f64) -> f64 {
        acc + a * b
    }

    fn acc_add(&self, acc: f64, v: f64) -> f64 {
        acc + v
    }

    fn acc_finish(&self, acc: f64) -> f64 {
        acc
    }

    fn mul(&self, a: f64, b: f64) -> f64 {
        a * b
    }

    fn sigmoid(&self, x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn sigmoid_deriv(&self, a: f64) -> f64 {
        a * (1.0 - a)
    }

    fn output_delta(&self, a: f64, target: f64, deriv: f64) -> f64 {
        (a - target) * deriv
    }

    #[inline]
    fn sgd(&self, w: f64, lr: f64, delta: f64, act: f64) -> f64 {
        w - lr * delta * act
    }

    fn sgd_bias(&self, b: f64, lr: f64, delta: f64) -> f64 {
        b - lr * delta
    }

    fn label(&self) -> String {
        "f64".to_string()
    }

    fn encode(&self, v: f64) -> String {
        format!("{v:?}")
    }

    fn decode(&self, s: &str) -> Option<f64> {
        s.parse().ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fixed(pub FxFormat);

impl Fixed {
    pub fn format(&self) -> FxFormat {
        self.0
    }

    fn value(&self, raw: i128) -> FxValue {
        let fmt = self.0;
        FxValue::from_raw(raw.clamp(fmt.min_raw() as i128, fmt.max_raw() as i128) as i64, fmt)
    }
}

impl Arith for Fixed {
    type Value = FxValue;
    type Acc = WideAcc;

    fn zero(&self) -> FxValue {
        FxValue::zero(self.0)
    }

    fn from_real(&self, x: f64) -> FxValue {
        quantize(x, self.0)
    }

    fn to_real(&self, v: FxValue) -> f64 {
        v.to_f64()
    }

    fn acc_zero(&self) -> WideAcc {
        WideAcc::default()
    }

    #[inline]
    fn acc_mac(&self, acc: WideAcc, a: FxValue, b: FxValue) -> WideAcc {
        acc.mac(a, b)
    }

    fn acc_add(&self, acc: WideAcc, v: FxValue) -> WideAcc {
        acc.add(v)
    }

    fn acc_finish(&self, acc: WideAcc) -> FxValue {
        acc.finish(self.0)
    }

    fn mul(&self, a: FxValue, b: FxValue) -> FxValue {
        crate::fixedpoint::fx_mul(a, b)
    }

    fn sigmoid(&self, x: FxValue) -> FxValue {
        sigmoid_fx(x)
    }

    fn sigmoid_deriv(&self, a: FxValue) -> FxValue {
        sigmoid_deriv_from_act(a)
    }

    fn output_delta(&self, a: FxValue, target: FxValue, deriv: FxValue) -> FxValue {
        // Difference and product kept exact, rounded once.
        let diff = a.raw() as i128 - target.raw() as i128;
        self.value(round_shift(diff * deriv.raw() as i128, self.0.frac_bits()))
    }

    #[inline]
    fn sgd(&self, w: FxValue, lr: FxValue, delta: FxValue, act: FxValue) -> FxValue {
        // The triple product carries 3F fraction bits and is rounded once.
        let step = lr.raw() as i128 * delta.raw() as i128 * act.raw() as i128;
        let step = round_shift(step, 2 * self.0.frac_bits());
        self.value(w.raw() as i128 - step)
    }

    fn sgd_bias(&self, b: FxValue, lr: FxValue, delta: FxValue) -> FxValue {
        let step = round_shift(lr.raw() as i128 * delta.raw() as i128, self.0.frac_bits());
        self.value(b.raw() as i128 - step)
    }

    fn label(&self) -> String {
        self.0.to_string()
    }

    fn encode(&self, v: FxValue) -> String {
        v.raw().to_string()
    }

    fn decode(&self, s: &str) -> Option<FxValue> {
        let raw: i64 = s.parse().ok()?;
        (raw >= self.0.min_raw() && raw <= self.0.max_raw()).then(|| FxValue::from_raw(raw, self.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_delta_matches_quantized_real() {
        let fx = Fixed("fx10:3.7".parse().unwrap());
        let step = 1.0 / 128.0;
        for a_raw in (0..=128).step_by(7) {
            for t in [0.0, 1.0] {
                for d_raw in [0, 3, 16, 32] {
                    let a = fx.from_real(a_raw as f64 * step);
                    let tv = fx.from_real(t);
                    let d = fx.from_real(d_raw as f64 * step);
                    let expected = fx.from_real(Real.output_delta(a.to_f64(), t, d.to_f64()));
                    assert_eq!(fx.output_delta(a, tv, d), expected);
                }
            }
        }
        assert_eq!(Real.output_delta(0.8, 0.0, 0.16), 0.8 * 0.16);
        assert_eq!(Real.output_delta(0.3, 0.3, 0.21), 0.0);
    }

    #[test]
    fn sgd_scalar() {
        assert_eq!(Real.sgd(1.0, 0.5, 0.2, 0.5), 0.95);
        let fx = Fixed("fx16:3.13".parse().unwrap());
        let w = fx.sgd(fx.from_real(1.0), fx.from_real(0.5), fx.from_real(0.25), fx.from_real(0.5));
        assert_eq!(w.to_f64(), 0.9375);
        // Tiny steps round to zero.
        let fx10 = Fixed("fx10:3.7".parse().unwrap());
        let tiny = fx10.from_real(1.0 / 128.0);
        assert_eq!(fx10.sgd(fx10.from_real(0.5), tiny, tiny, tiny).to_f64(), 0.5);
    }

    #[test]
    fn codecs_round_trip() {
        for v in [0.1, -3.25e-9, 1.0 / 3.0, 12345.678] {
            assert_eq!(Real.decode(&Real.encode(v)), Some(v));
        }
        let fx = Fixed("fx12:3.9".parse().unwrap());
        let v = fx.from_real(-1.37);
        assert_eq!(fx.decode(&fx.encode(v)), Some(v));
        assert_eq!(fx.decode("5000"), None);
    }
}
