//! Scalar abstractions shared by the exact and floating-point code paths.
//!
//! Geometry, determinants and the gap-chain recursion are written once over
//! [`Scalar`]; the same code then runs on `f64` for large horizons and on
//! [`BigRational`] (or `i128`) when an identity has to hold exactly.

use std::fmt::Debug;
use std::ops::Neg;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Float, FloatConst, FromPrimitive, Num, One, ToPrimitive, Zero};

/// Exact rational number used for all lattice masses.
pub type Rational = BigRational;

/// A number that can stand in for walk coordinates and probability masses.
pub trait Scalar: Num + Clone + PartialOrd + Neg<Output = Self> + Debug + Send + Sync {
    fn from_int(v: i64) -> Self;
    /// Conversion from an exact rational; lossy for floating point types.
    fn from_rational(r: &Rational) -> Self;
    fn as_f64(&self) -> f64;
    fn finite(&self) -> bool {
        true
    }
    /// `true` when arithmetic on this type is exact (no rounding).
    const EXACT: bool;
}

macro_rules! impl_scalar_float {
    ($t:ty) => {
        impl Scalar for $t {
            fn from_int(v: i64) -> Self {
                v as $t
            }
            fn from_rational(r: &Rational) -> Self {
                rational_to_f64(r) as $t
            }
            fn as_f64(&self) -> f64 {
                *self as f64
            }
            fn finite(&self) -> bool {
                <$t>::is_finite(*self)
            }
            const EXACT: bool = false;
        }
    };
}

impl_scalar_float!(f32);
impl_scalar_float!(f64);

impl Scalar for i64 {
    fn from_int(v: i64) -> Self {
        v
    }
    fn from_rational(r: &Rational) -> Self {
        assert!(r.is_integer(), "non-integral rational {r} converted to i64");
        r.to_integer().to_i64().expect("rational out of i64 range")
    }
    fn as_f64(&self) -> f64 {
        *self as f64
    }
    const EXACT: bool = true;
}

impl Scalar for i128 {
    fn from_int(v: i64) -> Self {
        v as i128
    }
    fn from_rational(r: &Rational) -> Self {
        assert!(r.is_integer(), "non-integral rational {r} converted to i128");
        r.to_integer().to_i128().expect("rational out of i128 range")
    }
    fn as_f64(&self) -> f64 {
        *self as f64
    }
    const EXACT: bool = true;
}

impl Scalar for BigInt {
    fn from_int(v: i64) -> Self {
        BigInt::from(v)
    }
    fn from_rational(r: &Rational) -> Self {
        assert!(r.is_integer(), "non-integral rational {r} converted to BigInt");
        r.to_integer()
    }
    fn as_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    const EXACT: bool = true;
}

impl Scalar for Rational {
    fn from_int(v: i64) -> Self {
        Rational::from_integer(BigInt::from(v))
    }
    fn from_rational(r: &Rational) -> Self {
        r.clone()
    }
    fn as_f64(&self) -> f64 {
        rational_to_f64(self)
    }
    const EXACT: bool = true;
}

/// Floating point scalar for densities and quadrature (`f32` or `f64`).
pub trait Real: Float + FloatConst + FromPrimitive + Scalar {}
impl Real for f32 {}
impl Real for f64 {}

/// Rational to nearest-ish `f64`, robust to numerators and denominators
/// that individually overflow `f64`.
pub fn rational_to_f64(r: &Rational) -> f64 {
    ratio_to_f64(r.numer(), r.denom())
}

/// `num / den` in `f64` without forming the reduced fraction.
pub fn ratio_to_f64(num: &BigInt, den: &BigInt) -> f64 {
    if num.is_zero() {
        return 0.0;
    }
    if let (Some(n), Some(d)) = (num.to_f64(), den.to_f64()) {
        if n.is_finite() && d.is_finite() && d != 0.0 {
            return n / d;
        }
    }
    // shift both to ~64 significant bits before dividing
    let ns = (num.bits() as i64 - 64).max(0);
    let ds = (den.bits() as i64 - 64).max(0);
    let n = (num >> ns as usize).to_f64().unwrap_or(0.0);
    let d = (den >> ds as usize).to_f64().unwrap_or(1.0);
    n / d * 2f64.powi((ns - ds) as i32)
}

/// Exact rational `num / den`.
pub fn ratio(num: impl Into<BigInt>, den: impl Into<BigInt>) -> Rational {
    Rational::new(num.into(), den.into())
}

/// Canonical `"p/q"` (or `"p"` for integers) string used in reports.
pub fn fraction_string(r: &Rational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_to_f64_handles_huge_parts() {
        let big = BigInt::from(3) * BigInt::from(2).pow(3000);
        let r = Rational::new(big.clone(), BigInt::from(2).pow(3001));
        assert!((rational_to_f64(&r) - 1.5).abs() < 1e-15);
        assert_eq!(rational_to_f64(&Rational::zero()), 0.0);
    }

    #[test]
    fn fraction_strings() {
        assert_eq!(fraction_string(&ratio(6, 8)), "3/4");
        assert_eq!(fraction_string(&ratio(-4, 2)), "-2");
        assert_eq!(fraction_string(&Rational::zero()), "0");
    }
}
