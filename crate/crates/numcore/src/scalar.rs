//! Scalar abstraction: the numeric core is generic over the floating-point
//! type. `f64` is the default everywhere else in the workspace.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar usable in tensors: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Raw bit pattern, widened to `u64`. Used for bit-exact comparisons.
    fn to_bits_u64(self) -> u64;

    /// Lossless-enough conversion for serialization (checkpoints store f64).
    fn to_f64_lossy(self) -> f64;

    /// Inverse of [`Scalar::to_f64_lossy`].
    fn from_f64_lossy(v: f64) -> Self;
}

impl Scalar for f32 {
    fn to_bits_u64(self) -> u64 {
        u64::from(self.to_bits())
    }

    fn to_f64_lossy(self) -> f64 {
        f64::from(self)
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

/// Converts an `f64` constant into `T`, panicking only on genuinely
/// unrepresentable values (never happens for the constants we use).
pub fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("constant not representable in scalar type")
}
