//! Binary fixed-point reals on `BigInt` with 256 fractional bits, used as an
//! extended-precision reference for scalar special functions.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_traits::{Signed, ToPrimitive, Zero};
use std::ops::{Add, Div, Mul, Neg, Sub};

const FRAC: u32 = 256;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fixed(BigInt);

impl Fixed {
    pub fn from_int(v: i64) -> Self {
        Fixed(BigInt::from(v) << FRAC)
    }

    /// Exact conversion of a finite double.
    pub fn from_f64(v: f64) -> Self {
        assert!(v.is_finite());
        if v == 0.0 {
            return Fixed(BigInt::zero());
        }
        let bits = v.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp - 1075) };
        let m = BigInt::from(mant) * sign;
        let shift = e + FRAC as i64;
        Fixed(if shift >= 0 { m << shift as u32 } else { m >> (-shift) as u32 })
    }

    /// Nearest double (up to one ulp).
    pub fn to_f64(&self) -> f64 {
        let bits = self.0.bits() as i64;
        let keep = 64i64;
        if bits <= keep {
            return self.0.to_f64().unwrap() * 2f64.powi(-(FRAC as i32));
        }
        let drop = bits - keep;
        let top = (&self.0 >> drop as u32).to_f64().unwrap();
        top * 2f64.powi((drop - FRAC as i64) as i32)
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn abs(&self) -> Self {
        Fixed(self.0.abs())
    }

    pub fn sqrt(&self) -> Self {
        assert!(!self.0.is_negative());
        Fixed((&self.0 << FRAC).sqrt())
    }

    /// Taylor series after halving the argument `2^10` times.
    pub fn exp(&self) -> Self {
        if self.0.is_negative() {
            return Fixed::from_int(1) / (-self.clone()).exp();
        }
        let halvings = 10u32;
        let r = Fixed(&self.0 >> halvings);
        let one = Fixed::from_int(1);
        let mut sum = one.clone();
        let mut term = one;
        let mut k = 1i64;
        loop {
            term = term * r.clone() / Fixed::from_int(k);
            if term.is_zero() {
                break;
            }
            sum = sum + term.clone();
            k += 1;
        }
        for _ in 0..halvings {
            sum = sum.clone() * sum;
        }
        sum
    }

    /// atan(1/m) for an integer m > 1.
    fn atan_inv(m: i64) -> Self {
        let x = Fixed::from_int(1) / Fixed::from_int(m);
        let x2 = x.clone() * x.clone();
        let mut power = x;
        let mut sum = Fixed(BigInt::zero());
        let mut k = 0i64;
        while !power.is_zero() {
            let term = power.clone() / Fixed::from_int(2 * k + 1);
            sum = if k % 2 == 0 { sum + term } else { sum - term };
            power = power * x2.clone();
            k += 1;
        }
        sum
    }

    pub fn pi() -> Self {
        Fixed::atan_inv(5) * Fixed::from_int(16) - Fixed::atan_inv(239) * Fixed::from_int(4)
    }
}

impl Add for Fixed {
    type Output = Fixed;
    fn add(self, o: Fixed) -> Fixed {
        Fixed(self.0 + o.0)
    }
}

impl Sub for Fixed {
    type Output = Fixed;
    fn sub(self, o: Fixed) -> Fixed {
        Fixed(self.0 - o.0)
    }
}

impl Mul for Fixed {
    type Output = Fixed;
    fn mul(self, o: Fixed) -> Fixed {
        Fixed((self.0 * o.0) >> FRAC)
    }
}

impl Div for Fixed {
    type Output = Fixed;
    fn div(self, o: Fixed) -> Fixed {
        assert!(!o.0.is_zero());
        Fixed((self.0 << FRAC) / o.0)
    }
}

impl Neg for Fixed {
    type Output = Fixed;
    fn neg(self) -> Fixed {
        Fixed(-self.0)
    }
}

/// Matérn ν = 5/2 correlation `(1 + √5 d/ρ + 5d²/(3ρ²)) exp(−√5 d/ρ)`.
pub fn matern52(d: f64, rho: f64) -> f64 {
    let s = Fixed::from_int(5).sqrt() * Fixed::from_f64(d) / Fixed::from_f64(rho);
    let poly = Fixed::from_int(1) + s.clone() + s.clone() * s.clone() / Fixed::from_int(3);
    (poly * (-s).exp()).to_f64()
}

/// Standard normal CDF from `½ + φ(z) Σ z^(2n+1)/(2n+1)!!`.
pub fn normal_cdf(z: f64) -> f64 {
    let x = Fixed::from_f64(z.abs());
    let x2 = x.clone() * x.clone();
    let mut term = x;
    let mut sum = Fixed(BigInt::zero());
    let mut k = 1i64;
    while !term.is_zero() {
        sum = sum + term.clone();
        k += 2;
        term = term * x2.clone() / Fixed::from_int(k);
    }
    let half = Fixed::from_int(1) / Fixed::from_int(2);
    let density = (-(x2 * half.clone())).exp() / (Fixed::pi() * Fixed::from_int(2)).sqrt();
    let upper = half + density * sum;
    if z >= 0.0 {
        upper.to_f64()
    } else {
        (Fixed::from_int(1) - upper).to_f64()
    }
}

#[allow(clippy::approx_constant)]
#[test]
fn fixed_point_constants() {
    assert_eq!(Fixed::pi().to_f64(), std::f64::consts::PI);
    assert_eq!(Fixed::from_int(1).exp().to_f64(), std::f64::consts::E);
    assert_eq!(Fixed::from_int(2).sqrt().to_f64(), std::f64::consts::SQRT_2);
    assert_eq!(Fixed::from_f64(-0.375).to_f64(), -0.375);
}
