//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::str::FromStr;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used throughout the crate (implemented for `f32` and `f64`).
///
/// `Display`/`FromStr` round-trip exactly for both primitive floats, which the
/// text artifact formats rely on.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + FromStr
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// One draw from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Converts an `f64` literal. Every literal used in the crate is representable.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Real for f64 {
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Complex scalar over [`Real`].
pub type Cplx<T> = Complex<T>;

/// `Σ conj(a_i)·b_i`, i.e. `aᴴb`.
#[inline]
pub fn inner<T: Real>(a: &[Cplx<T>], b: &[Cplx<T>]) -> Cplx<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(Cplx::new(T::zero(), T::zero()), |acc, (x, y)| acc + x.conj() * y)
}

/// Squared Euclidean norm of a complex vector.
#[inline]
pub fn norm_sqr<T: Real>(a: &[Cplx<T>]) -> T {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// Circularly symmetric complex Gaussian with total variance `var`.
#[inline]
pub fn cn<T: Real, R: Rng + ?Sized>(rng: &mut R, var: T) -> Cplx<T> {
    let s = (var / T::lit(2.0)).sqrt();
    let re = T::standard_normal(rng);
    let im = T::standard_normal(rng);
    Cplx::new(re * s, im * s)
}

/// Converts dBm to watts.
pub fn dbm_to_watts<T: Real>(dbm: T) -> T {
    T::lit(10.0).powf((dbm - T::lit(30.0)) / T::lit(10.0))
}

/// Converts watts to dBm.
pub fn watts_to_dbm<T: Real>(w: T) -> T {
    T::lit(10.0) * w.log10() + T::lit(30.0)
}

/// Median of a slice (mean of the two central values for even lengths).
/// Returns NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile, `q ∈ [0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}
