use nalgebra::DVector;

use crate::error::{MampcError, Result};
use crate::Real;

/// Axis-aligned box `{x : lower <= x <= upper}`; bounds may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet<T: Real> {
    lower: DVector<T>,
    upper: DVector<T>,
}

impl<T: Real> BoxSet<T> {
    pub fn new(lower: DVector<T>, upper: DVector<T>) -> Result<Self> {
        crate::error::check_dim("box bounds", lower.len(), upper.len())?;
        for i in 0..lower.len() {
            if lower[i].is_nan() || upper[i].is_nan() {
                return Err(MampcError::NonFinite("box bounds"));
            }
            if lower[i] > upper[i] {
                return Err(MampcError::InvalidBox(i));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_slices(lower: &[T], upper: &[T]) -> Result<Self> {
        Self::new(DVector::from_column_slice(lower), DVector::from_column_slice(upper))
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: DVector::from_element(n, -T::infinity()),
            upper: DVector::from_element(n, T::infinity()),
        }
    }

    /// `[-h_i, h_i]` in every coordinate.
    pub fn symmetric(half_widths: &[T]) -> Result<Self> {
        let upper = DVector::from_column_slice(half_widths);
        Self::new(-upper.clone(), upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<T> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<T> {
        &self.upper
    }

    pub fn is_bounded(&self, i: usize) -> (bool, bool) {
        (self.lower[i].is_finite(), self.upper[i].is_finite())
    }

    pub fn contains(&self, x: &[T]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .enumerate()
                .all(|(i, &v)| v >= self.lower[i] && v <= self.upper[i])
    }

    /// Largest bound violation (0 inside the box).
    pub fn violation(&self, x: &[T]) -> T {
        let mut worst = T::zero();
        for (i, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[i] - v).max(v - self.upper[i]);
        }
        worst
    }

    pub fn clamp_in_place(&self, x: &mut [T]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.max(self.lower[i]).min(self.upper[i]);
        }
    }

    pub fn clamp(&self, x: &DVector<T>) -> DVector<T> {
        let mut out = x.clone();
        self.clamp_in_place(out.as_mut_slice());
        out
    }

    pub fn center(&self) -> DVector<T> {
        (&self.lower + &self.upper) * T::lit(0.5)
    }

    pub fn half_widths(&self) -> DVector<T> {
        (&self.upper - &self.lower) * T::lit(0.5)
    }

    pub fn shifted(&self, offset: &DVector<T>) -> Self {
        Self {
            lower: &self.lower + offset,
            upper: &self.upper + offset,
        }
    }

    /// Pulls every face inward by `delta`. `None` when an interval collapses.
    pub fn erode(&self, delta: T) -> Result<Option<Self>> {
        check_delta(delta)?;
        if delta == T::zero() {
            return Ok(Some(self.clone()));
        }
        let lower = self.lower.map(|l| l + delta);
        let upper = self.upper.map(|u| u - delta);
        if lower.iter().zip(upper.iter()).any(|(l, u)| l >= u) {
            return Ok(None);
        }
        Ok(Some(Self { lower, upper }))
    }
}

/// Euclidean ball of the given radius centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBall<T: Real> {
    radius: T,
}

impl<T: Real> NormBall<T> {
    pub fn new(radius: T) -> Result<Self> {
        if !(radius > T::zero()) || !radius.is_finite() {
            return Err(MampcError::InvalidParameter {
                name: "radius".into(),
                reason: format!("must be positive and finite, got {radius}"),
            });
        }
        Ok(Self { radius })
    }

    pub fn radius(&self) -> T {
        self.radius
    }

    pub fn contains(&self, x: &[T]) -> bool {
        let sq = x.iter().fold(T::zero(), |acc, &v| acc + v * v);
        sq <= self.radius * self.radius
    }

    /// Shrinks the radius by `delta`; `None` once nothing is left.
    pub fn erode(&self, delta: T) -> Result<Option<Self>> {
        check_delta(delta)?;
        if delta >= self.radius {
            return Ok(None);
        }
        Ok(Some(Self {
            radius: self.radius - delta,
        }))
    }
}

fn check_delta<T: Real>(delta: T) -> Result<()> {
    if delta >= T::zero() && delta.is_finite() {
        Ok(())
    } else {
        Err(MampcError::InvalidParameter {
            name: "erosion_delta".into(),
            reason: format!("must be finite and non-negative, got {delta}"),
        })
    }
}

pub(crate) fn norm<T: Real>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
}
