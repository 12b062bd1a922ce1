//! Sound scalar and interval arithmetic.
//!
//! Two interchangeable endpoint types back every coefficient, constant and
//! concrete bound in the analysis:
//!
//! - `f64` (mode [`SoundnessMode::WidenedFloat64`]): each operation returns the
//!   round-to-nearest result, stepped to the adjacent representable value when
//!   an error-free transformation shows the result was inexact. Lower endpoints
//!   step toward −∞, upper endpoints toward +∞. Near overflow or underflow the
//!   step is taken unconditionally.
//! - [`Rational`] (mode [`SoundnessMode::ExactRational`]): exact arbitrary
//!   precision arithmetic, used as a testing oracle.
//!
//! Overflow saturates to ±∞. An infinite endpoint is still sound; it just
//! proves nothing.

use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

pub type Rational = BigRational;

/// Which endpoint type an analysis runs with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoundnessMode {
    WidenedFloat64,
    ExactRational,
}

impl fmt::Display for SoundnessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SoundnessMode::WidenedFloat64 => f.write_str("widened"),
            SoundnessMode::ExactRational => f.write_str("rational"),
        }
    }
}

/// Scalar type usable as an interval endpoint.
///
/// All `*_down` operations return a value `<=` the exact real result and all
/// `*_up` operations a value `>=` it.
pub trait Endpoint: Clone + PartialOrd + fmt::Debug + Send + Sync + 'static {
    const MODE: SoundnessMode;

    fn zero() -> Self;
    fn one() -> Self;
    fn is_zero(&self) -> bool;
    fn neg(&self) -> Self;
    fn abs(&self) -> Self;

    fn add_down(&self, rhs: &Self) -> Self;
    fn add_up(&self, rhs: &Self) -> Self;
    fn mul_down(&self, rhs: &Self) -> Self;
    fn mul_up(&self, rhs: &Self) -> Self;
    fn div_down(&self, rhs: &Self) -> Self;
    fn div_up(&self, rhs: &Self) -> Self;

    fn sub_down(&self, rhs: &Self) -> Self {
        self.add_down(&rhs.neg())
    }

    fn sub_up(&self, rhs: &Self) -> Self {
        self.add_up(&rhs.neg())
    }

    /// Tightest pair `(lo, hi)` of this type with `lo <= r <= hi`.
    fn enclose(r: &Rational) -> (Self, Self);

    /// Largest multiple of `2^-bits` that is `<=` self.
    fn floor_dyadic(&self, bits: u32) -> Self;
    /// Smallest multiple of `2^-bits` that is `>=` self.
    fn ceil_dyadic(&self, bits: u32) -> Self;

    /// Upper bound on the deviation between the exact value of a sum of
    /// `terms` terms (of which `products` are products) and any conventional
    /// floating-point evaluation of it, in any order and any rounding mode.
    /// `abs_sum` bounds the sum of the absolute values of the terms.
    /// Exact endpoint types return zero.
    fn eval_error(abs_sum: &Self, terms: usize, products: usize) -> Self;

    fn is_finite(&self) -> bool;

    /// An `f64` that is `<=` self.
    fn to_f64_down(&self) -> f64;
    /// An `f64` that is `>=` self.
    fn to_f64_up(&self) -> f64;
    /// Exact value, if finite.
    fn to_rational(&self) -> Option<Rational>;
}

fn max_ref<'a, T: PartialOrd>(a: &'a T, b: &'a T) -> &'a T {
    if a >= b {
        a
    } else {
        b
    }
}

fn min_ref<'a, T: PartialOrd>(a: &'a T, b: &'a T) -> &'a T {
    if a <= b {
        a
    } else {
        b
    }
}

// ---------------------------------------------------------------------------
// f64
// ---------------------------------------------------------------------------

/// Unit roundoff valid for every IEEE rounding mode.
const UNIT_ROUNDOFF: f64 = f64::EPSILON; // 2^-52
const SMALLEST_SUBNORMAL: f64 = 4.940_656_458_412_465_4e-324; // 2^-1074
/// Below this magnitude a product may have lost bits to underflow.
const EXACT_PRODUCT_MIN: f64 = 1.0e-270;
/// Above this magnitude the Veltkamp split may overflow.
const SPLIT_MAX: f64 = 1.0e290;

#[inline]
fn two_sum_err(a: f64, b: f64, s: f64) -> f64 {
    let bb = s - a;
    (a - (s - bb)) + (b - bb)
}

#[inline]
fn split(a: f64) -> (f64, f64) {
    let c = 134_217_729.0 * a; // 2^27 + 1
    let hi = c - (c - a);
    (hi, a - hi)
}

#[inline]
fn two_prod_err(a: f64, b: f64, p: f64) -> f64 {
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    ((ah * bh - p) + ah * bl + al * bh) + al * bl
}

/// Sign of (exact - rounded) for a product, or `None` if it cannot be decided
/// cheaply.
#[inline]
fn product_error_sign(a: f64, b: f64, p: f64) -> Option<Ordering> {
    let ap = p.abs();
    if ap < EXACT_PRODUCT_MIN || a.abs() > SPLIT_MAX || b.abs() > SPLIT_MAX {
        return None;
    }
    two_prod_err(a, b, p).partial_cmp(&0.0)
}

/// Sign of (exact - rounded) for a quotient `q = a / b`, or `None` if it
/// cannot be decided cheaply. `q·b = p + e` exactly, and `a - p` is exact
/// because `p` is within a factor of two of `a`.
#[inline]
fn quotient_error_sign(a: f64, b: f64, q: f64) -> Option<Ordering> {
    let p = q * b;
    if !p.is_finite() || product_error_sign(q, b, p).is_none() || a.abs() < EXACT_PRODUCT_MIN {
        return None;
    }
    let e = two_prod_err(q, b, p);
    let r = (a - p).partial_cmp(&e)?;
    Some(if b > 0.0 { r } else { r.reverse() })
}

impl Endpoint for f64 {
    const MODE: SoundnessMode = SoundnessMode::WidenedFloat64;

    #[inline]
    fn zero() -> Self {
        0.0
    }

    #[inline]
    fn one() -> Self {
        1.0
    }

    #[inline]
    fn is_zero(&self) -> bool {
        *self == 0.0
    }

    #[inline]
    fn neg(&self) -> Self {
        -*self
    }

    #[inline]
    fn abs(&self) -> Self {
        f64::abs(*self)
    }

    #[inline]
    fn add_down(&self, rhs: &Self) -> Self {
        let (a, b) = (*self, *rhs);
        let s = a + b;
        if s.is_nan() {
            return f64::NEG_INFINITY;
        }
        if s.is_infinite() {
            return if s > 0.0 && a.is_finite() && b.is_finite() {
                f64::MAX
            } else {
                s
            };
        }
        if two_sum_err(a, b, s) < 0.0 {
            s.next_down()
        } else {
            s
        }
    }

    #[inline]
    fn add_up(&self, rhs: &Self) -> Self {
        let (a, b) = (*self, *rhs);
        let s = a + b;
        if s.is_nan() {
            return f64::INFINITY;
        }
        if s.is_infinite() {
            return if s < 0.0 && a.is_finite() && b.is_finite() {
                -f64::MAX
            } else {
                s
            };
        }
        if two_sum_err(a, b, s) > 0.0 {
            s.next_up()
        } else {
            s
        }
    }

    #[inline]
    fn mul_down(&self, rhs: &Self) -> Self {
        let (a, b) = (*self, *rhs);
        if a == 0.0 || b == 0.0 {
            return 0.0;
        }
        let p = a * b;
        if p.is_infinite() {
            return if p > 0.0 && a.is_finite() && b.is_finite() {
                f64::MAX
            } else {
                p
            };
        }
        match product_error_sign(a, b, p) {
            Some(Ordering::Less) | None => p.next_down(),
            _ => p,
        }
    }

    #[inline]
    fn mul_up(&self, rhs: &Self) -> Self {
        let (a, b) = (*self, *rhs);
        if a == 0.0 || b == 0.0 {
            return 0.0;
        }
        let p = a * b;
        if p.is_infinite() {
            return if p < 0.0 && a.is_finite() && b.is_finite() {
                -f64::MAX
            } else {
                p
            };
        }
        match product_error_sign(a, b, p) {
            Some(Ordering::Greater) | None => p.next_up(),
            _ => p,
        }
    }

    fn div_down(&self, rhs: &Self) -> Self {
        let (a, b) = (*self, *rhs);
        if a == 0.0 {
            return 0.0;
        }
        let q = a / b;
        if q.is_nan() {
            return f64::NEG_INFINITY;
        }
        if q.is_infinite() {
            return if q > 0.0 && a.is_finite() && b != 0.0 {
                f64::MAX
            } else {
                q
            };
        }
        if q == 0.0 && b.is_infinite() {
            return 0.0;
        }
        match quotient_error_sign(a, b, q) {
            Some(Ordering::Less) | None => q.next_down(),
            _ => q,
        }
    }

    fn div_up(&self, rhs: &Self) -> Self {
        let (a, b) = (*self, *rhs);
        if a == 0.0 {
            return 0.0;
        }
        let q = a / b;
        if q.is_nan() {
            return f64::INFINITY;
        }
        if q.is_infinite() {
            return if q < 0.0 && a.is_finite() && b != 0.0 {
                -f64::MAX
            } else {
                q
            };
        }
        if q == 0.0 && b.is_infinite() {
            return 0.0;
        }
        match quotient_error_sign(a, b, q) {
            Some(Ordering::Greater) | None => q.next_up(),
            _ => q,
        }
    }

    fn enclose(r: &Rational) -> (Self, Self) {
        f64_enclosure(r)
    }

    fn floor_dyadic(&self, bits: u32) -> Self {
        if !self.is_finite() {
            return *self;
        }
        let scale = 2f64.powi(bits as i32);
        let t = *self * scale;
        if t.is_infinite() {
            return *self;
        }
        t.floor() / scale
    }

    fn ceil_dyadic(&self, bits: u32) -> Self {
        if !self.is_finite() {
            return *self;
        }
        let scale = 2f64.powi(bits as i32);
        let t = *self * scale;
        if t.is_infinite() {
            return *self;
        }
        t.ceil() / scale
    }

    fn eval_error(abs_sum: &Self, terms: usize, products: usize) -> Self {
        if terms == 0 {
            return 0.0;
        }
        let n = terms as f64;
        // gamma_n = n u / (1 - n u), rounded up.
        let nu = n.mul_up(&UNIT_ROUNDOFF);
        let den = 1.0.sub_down(&nu);
        if den <= 0.0 {
            return f64::INFINITY;
        }
        let gamma = nu.div_up(&den);
        let rel = gamma.mul_up(abs_sum);
        let underflow = (2.0 * products as f64).mul_up(&SMALLEST_SUBNORMAL);
        rel.add_up(&underflow)
    }

    #[inline]
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }

    fn to_f64_down(&self) -> f64 {
        *self
    }

    fn to_f64_up(&self) -> f64 {
        *self
    }

    fn to_rational(&self) -> Option<Rational> {
        Rational::from_float(*self)
    }
}

/// Tightest `f64` pair enclosing an exact rational.
pub fn f64_enclosure(r: &Rational) -> (f64, f64) {
    let approx = r.to_f64().unwrap_or(if r.is_negative() {
        f64::NEG_INFINITY
    } else {
        f64::INFINITY
    });
    let mut lo = if approx.is_infinite() {
        if approx > 0.0 {
            f64::MAX
        } else {
            f64::NEG_INFINITY
        }
    } else {
        approx
    };
    while lo.is_finite() && Rational::from_float(lo).map_or(false, |v| &v > r) {
        lo = lo.next_down();
    }
    let mut hi = if approx.is_infinite() {
        if approx < 0.0 {
            -f64::MAX
        } else {
            f64::INFINITY
        }
    } else {
        approx
    };
    while hi.is_finite() && Rational::from_float(hi).map_or(false, |v| &v < r) {
        hi = hi.next_up();
    }
    (lo, hi)
}

// ---------------------------------------------------------------------------
// Rational
// ---------------------------------------------------------------------------

fn pow2(bits: u32) -> BigInt {
    BigInt::from(1u8) << bits as usize
}

impl Endpoint for Rational {
    const MODE: SoundnessMode = SoundnessMode::ExactRational;

    fn zero() -> Self {
        Zero::zero()
    }

    fn one() -> Self {
        num_traits::One::one()
    }

    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }

    fn neg(&self) -> Self {
        -self
    }

    fn abs(&self) -> Self {
        Signed::abs(self)
    }

    fn add_down(&self, rhs: &Self) -> Self {
        self + rhs
    }

    fn add_up(&self, rhs: &Self) -> Self {
        self + rhs
    }

    fn mul_down(&self, rhs: &Self) -> Self {
        if Zero::is_zero(self) || Zero::is_zero(rhs) {
            return Zero::zero();
        }
        self * rhs
    }

    fn mul_up(&self, rhs: &Self) -> Self {
        self.mul_down(rhs)
    }

    fn div_down(&self, rhs: &Self) -> Self {
        self / rhs
    }

    fn div_up(&self, rhs: &Self) -> Self {
        self / rhs
    }

    fn enclose(r: &Rational) -> (Self, Self) {
        (r.clone(), r.clone())
    }

    fn floor_dyadic(&self, bits: u32) -> Self {
        let scale = pow2(bits);
        let n = (self.numer() * &scale).div_floor(self.denom());
        Rational::new(n, scale)
    }

    fn ceil_dyadic(&self, bits: u32) -> Self {
        let scale = pow2(bits);
        let n = (self.numer() * &scale).div_ceil(self.denom());
        Rational::new(n, scale)
    }

    fn eval_error(_abs_sum: &Self, _terms: usize, _products: usize) -> Self {
        Zero::zero()
    }

    fn is_finite(&self) -> bool {
        true
    }

    fn to_f64_down(&self) -> f64 {
        f64_enclosure(self).0
    }

    fn to_f64_up(&self) -> f64 {
        f64_enclosure(self).1
    }

    fn to_rational(&self) -> Option<Rational> {
        Some(self.clone())
    }
}

// ---------------------------------------------------------------------------
// Interval
// ---------------------------------------------------------------------------

/// Closed interval `[lo, hi]` with `lo <= hi`.
#[derive(Clone, Debug, PartialEq)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Endpoint> Interval<T> {
    pub fn new(lo: T, hi: T) -> Self {
        debug_assert!(lo <= hi, "invalid interval [{lo:?}, {hi:?}]");
        Interval { lo, hi }
    }

    pub fn point(v: T) -> Self {
        Interval {
            lo: v.clone(),
            hi: v,
        }
    }

    pub fn zero() -> Self {
        Self::point(T::zero())
    }

    /// Tightest enclosure of an exact value.
    pub fn from_rational(r: &Rational) -> Self {
        let (lo, hi) = T::enclose(r);
        Interval { lo, hi }
    }

    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }

    pub fn is_zero(&self) -> bool {
        self.lo.is_zero() && self.hi.is_zero()
    }

    pub fn contains(&self, v: &T) -> bool {
        &self.lo <= v && v <= &self.hi
    }

    /// `other ⊆ self`
    pub fn encloses(&self, other: &Interval<T>) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn neg(&self) -> Self {
        Interval {
            lo: self.hi.neg(),
            hi: self.lo.neg(),
        }
    }

    /// `max(|lo|, |hi|)`
    pub fn mag(&self) -> T {
        max_ref(&self.lo.abs(), &self.hi.abs()).clone()
    }

    pub fn relu(&self) -> Self {
        let z = T::zero();
        Interval {
            lo: max_ref(&self.lo, &z).clone(),
            hi: max_ref(&self.hi, &z).clone(),
        }
    }

    pub fn intersect(&self, other: &Interval<T>) -> Self {
        Interval {
            lo: max_ref(&self.lo, &other.lo).clone(),
            hi: min_ref(&self.hi, &other.hi).clone(),
        }
    }

    pub fn hull(&self, other: &Interval<T>) -> Self {
        Interval {
            lo: min_ref(&self.lo, &other.lo).clone(),
            hi: max_ref(&self.hi, &other.hi).clone(),
        }
    }

    /// `self += rhs`, avoiding a fresh allocation for big endpoints.
    #[inline]
    pub fn add_assign(&mut self, rhs: &Interval<T>) {
        self.lo = self.lo.add_down(&rhs.lo);
        self.hi = self.hi.add_up(&rhs.hi);
    }

    /// `self += a * w` for a point weight `w`.
    #[inline]
    pub fn add_mul_scalar(&mut self, a: &Interval<T>, w: &T) {
        if w.is_zero() || a.is_zero() {
            return;
        }
        let p = iv_mul_scalar(a, w);
        self.add_assign(&p);
    }

    /// `self += a * w` for an interval weight.
    #[inline]
    pub fn add_mul(&mut self, a: &Interval<T>, w: &Interval<T>) {
        if w.is_zero() || a.is_zero() {
            return;
        }
        let p = iv_mul_weight(a, w);
        self.add_assign(&p);
    }
}

impl<T: Endpoint + fmt::Display> fmt::Display for Interval<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

pub fn iv_add<T: Endpoint>(a: &Interval<T>, b: &Interval<T>) -> Interval<T> {
    Interval {
        lo: a.lo.add_down(&b.lo),
        hi: a.hi.add_up(&b.hi),
    }
}

pub fn iv_sub<T: Endpoint>(a: &Interval<T>, b: &Interval<T>) -> Interval<T> {
    Interval {
        lo: a.lo.sub_down(&b.hi),
        hi: a.hi.sub_up(&b.lo),
    }
}

/// Interval times an exact scalar; endpoint selection follows the sign of `w`.
#[inline]
pub fn iv_mul_scalar<T: Endpoint>(a: &Interval<T>, w: &T) -> Interval<T> {
    let z = T::zero();
    if w >= &z {
        Interval {
            lo: a.lo.mul_down(w),
            hi: a.hi.mul_up(w),
        }
    } else {
        Interval {
            lo: a.hi.mul_down(w),
            hi: a.lo.mul_up(w),
        }
    }
}

/// General interval product (four-corner rule).
pub fn iv_mul<T: Endpoint>(a: &Interval<T>, b: &Interval<T>) -> Interval<T> {
    if b.is_point() {
        return iv_mul_scalar(a, &b.lo);
    }
    if a.is_point() {
        return iv_mul_scalar(b, &a.lo);
    }
    let lows = [
        a.lo.mul_down(&b.lo),
        a.lo.mul_down(&b.hi),
        a.hi.mul_down(&b.lo),
        a.hi.mul_down(&b.hi),
    ];
    let highs = [
        a.lo.mul_up(&b.lo),
        a.lo.mul_up(&b.hi),
        a.hi.mul_up(&b.lo),
        a.hi.mul_up(&b.hi),
    ];
    let lo = lows.iter().skip(1).fold(&lows[0], |m, v| min_ref(m, v)).clone();
    let hi = highs.iter().skip(1).fold(&highs[0], |m, v| max_ref(m, v)).clone();
    Interval { lo, hi }
}

/// Product with a network weight given as the enclosure of an exact value
/// (a point whenever the weight is representable).
#[inline]
pub fn iv_mul_weight<T: Endpoint>(a: &Interval<T>, w: &Interval<T>) -> Interval<T> {
    if w.is_point() {
        iv_mul_scalar(a, &w.lo)
    } else {
        iv_mul(a, w)
    }
}

/// Sound dot product `Σ coeffs[i] * weights[i]`, accumulated in ascending
/// index order.
///
/// The result contains the exact real value and, in float mode, additionally
/// every result a conventional floating-point evaluation of the same sum can
/// produce, under any summation order and any rounding mode.
///
/// Panics if the lengths differ.
pub fn iv_dot<T: Endpoint>(coeffs: &[Interval<T>], weights: &[Interval<T>]) -> Interval<T> {
    assert_eq!(coeffs.len(), weights.len(), "iv_dot length mismatch");
    let mut acc = Interval::<T>::zero();
    let exact = T::MODE == SoundnessMode::ExactRational;
    let mut abs_sum = T::zero();
    let mut products = 0usize;
    for (c, w) in coeffs.iter().zip(weights) {
        if c.is_zero() || w.is_zero() {
            continue;
        }
        acc.add_assign(&iv_mul_weight(c, w));
        if !exact {
            abs_sum = abs_sum.add_up(&c.mag().mul_up(&w.mag()));
            products += 1;
        }
    }
    if !exact && products > 0 {
        let e = T::eval_error(&abs_sum, coeffs.len(), products);
        acc.lo = acc.lo.sub_down(&e);
        acc.hi = acc.hi.add_up(&e);
    }
    acc
}
