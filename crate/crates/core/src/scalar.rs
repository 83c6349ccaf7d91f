use std::fmt;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar accepted by every algorithm in this crate.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + fmt::Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only if the target type cannot
    /// represent the value at all, which never happens for f32/f64.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal not representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn is_nan(self) -> bool {
        self != self
    }

    #[inline]
    fn infinity() -> Self {
        Self::lit(f64::INFINITY)
    }

    #[inline]
    fn eps() -> Self {
        Self::default_epsilon()
    }

    /// `target` if the type resolves it, otherwise a small multiple of
    /// machine epsilon.
    #[inline]
    fn tol(target: f64) -> Self {
        let floor = Self::eps() * Self::lit(64.0);
        let t = Self::lit(target);
        if t > floor {
            t
        } else {
            floor
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}
