//! Scalar abstraction over the two supported element types.
//!
//! Training runs in `f32`; gradient verification runs the same code in `f64`.
//! Everything numeric in this crate is generic over [`Real`] so the two modes
//! share one implementation.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Inputs to `exp` are clamped to this range. Sigmoid/softmax saturate exactly
/// at ±30 in 32-bit, so the clamp changes nothing observable.
pub const EXP_CLAMP: f64 = 30.0;

pub trait Real:
    Copy
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    /// Container dtype code (0 = f32, 1 = f64).
    const DTYPE_CODE: u16;
    /// Element size on disk.
    const BYTE_WIDTH: usize;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Raw IEEE bits, zero-extended to 64 for uniform serialization.
    fn to_bits64(self) -> u64;
    fn from_bits64(bits: u64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// exp with the input clamped to ±[`EXP_CLAMP`].
    fn exp_clamped(self) -> Self {
        let lo = Self::from_f64(-EXP_CLAMP);
        let hi = Self::from_f64(EXP_CLAMP);
        self.maxv(lo).minv(hi).exp()
    }

    fn sigmoid(self) -> Self {
        Self::ONE / (Self::ONE + (-self).exp_clamped())
    }
}

impl Real for f32 {
    const DTYPE_CODE: u16 = 0;
    const BYTE_WIDTH: usize = 4;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn to_bits64(self) -> u64 {
        self.to_bits() as u64
    }
    #[inline(always)]
    fn from_bits64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f32::ln(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline(always)]
    fn maxv(self, other: Self) -> Self {
        f32::max(self, other)
    }
    #[inline(always)]
    fn minv(self, other: Self) -> Self {
        f32::min(self, other)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const DTYPE_CODE: u16 = 1;
    const BYTE_WIDTH: usize = 8;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn to_bits64(self) -> u64 {
        self.to_bits()
    }
    #[inline(always)]
    fn from_bits64(bits: u64) -> Self {
        f64::from_bits(bits)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline(always)]
    fn maxv(self, other: Self) -> Self {
        f64::max(self, other)
    }
    #[inline(always)]
    fn minv(self, other: Self) -> Self {
        f64::min(self, other)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(0.5f64, Real::sigmoid(0.0f64));
        assert_eq!(0.5f32, Real::sigmoid(0.0f32));
    }

    #[test]
    fn exp_clamp_saturates_cleanly() {
        // Way outside the clamp range: result equals exp at the clamp edge.
        assert_eq!(1e9f64.exp_clamped(), 30.0f64.exp());
        assert_eq!((-1e9f64).exp_clamped(), (-30.0f64).exp());
        assert!(1e9f32.exp_clamped().is_finite());
    }
}
