//! Scalar abstraction for the numeric core.
//!
//! All tensor math in this crate is generic over [`Scalar`] so the same
//! code path can run in `f32` (training and sampling) or `f64`
//! (finite-difference oracles and tight round-trip checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point scalar usable in every numeric routine of this crate.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used to narrow schedule constants and
    /// literals computed in double precision.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from(v).expect("finite f64 converts to every supported scalar")
    }

    /// Widening conversion to `f64` for accumulation and reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product with eight independent accumulators.
///
/// The fixed reassociation keeps results bitwise reproducible across runs
/// while letting the compiler vectorize the inner loop.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let base = i * 8;
        for lane in 0..8 {
            acc[lane] = acc[lane] + a[base + lane] * b[base + lane];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out += s * x` over slices of equal length.
pub fn axpy<T: Scalar>(out: &mut [T], s: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}
