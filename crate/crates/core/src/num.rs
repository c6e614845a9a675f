use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar accepted by the percentile and scoring kernels.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Sum + Send + Sync + 'static
{
    /// Lossless-where-possible conversion from `f64`; panics only for types
    /// that cannot represent ordinary finite constants.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("scalar must represent finite f64 constants")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Sum + Send + Sync + 'static
{
}

/// Dot product with 64-bit accumulation regardless of the storage type.
#[inline]
pub fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.as_f64() * y.as_f64())
        .sum()
}

/// Euclidean norm with 64-bit accumulation.
#[inline]
pub fn norm_f64<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}
