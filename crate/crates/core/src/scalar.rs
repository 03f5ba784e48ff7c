//! Scalar abstraction shared by the numeric parts of the pipeline.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Floating-point scalar used by the encoder, codebook and localizer math.
///
/// Implemented for `f32` and `f64`. Images are always stored as `f32`
/// intensities; the scalar only governs embeddings and pose statistics.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumCast
    + Sum
    + num_traits::NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + nalgebra::Scalar
    + 'static
{
    /// Bytes occupied by one value in memory (and in the encoder model file).
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Dot product with a fixed accumulation order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Independent accumulators let the compiler vectorize the loop while the
    // summation order stays fixed for a given length.
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}
