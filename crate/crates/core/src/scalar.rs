//! Scalar abstraction for the math core.
//!
//! Tensor storage, the gradient tape, positional embeddings, image metrics and
//! the eigensolver are generic over [`Scalar`]. The rest of the crate uses the
//! `f64` aliases exported from the crate root; f32 stays available for the
//! generic core (exercised in tests).

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    /// Conversion from f64 literals. Lossy for narrower types by design; every
    /// constant used by the crate is representable in f32.
    fn from_f64_c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("scalar conversion from f64")
    }

    fn to_f64_c(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar conversion to f64")
    }

    fn from_usize_c(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("scalar conversion from usize")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
