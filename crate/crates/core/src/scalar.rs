//! Scalar abstraction for the core math.
//!
//! Everything geometric or field-valued is generic over [`Real`], which is
//! satisfied by `f32` and `f64`. Concrete `f64` aliases for the main types
//! live at the crate root.

use nalgebra::RealField;
use num_traits::{FromPrimitive, NumCast};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real: RealField + Copy + FromPrimitive + NumCast {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` constant into the working scalar type.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite f64 constant")
}

/// Lossy conversion back to `f64` for reporting and serialization.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    num_traits::ToPrimitive::to_f64(&x).expect("scalar converts to f64")
}

#[inline]
pub fn deg_to_rad<T: Real>(deg: T) -> T {
    deg * T::pi() / real(180.0)
}

#[inline]
pub fn rad_to_deg<T: Real>(rad: T) -> T {
    rad * real::<T>(180.0) / T::pi()
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn wrap_deg_0_360<T: Real>(deg: T) -> T {
    let full = real(360.0);
    let mut a = deg - full * (deg / full).floor();
    // floor rounding can land exactly on 360 for tiny negatives
    if a >= full {
        a -= full;
    }
    if a < T::zero() {
        a += full;
    }
    a
}

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn wrap_deg_pm180<T: Real>(deg: T) -> T {
    let half = real(180.0);
    let a = wrap_deg_0_360(deg);
    if a > half {
        a - real(360.0)
    } else {
        a
    }
}
