//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::{Product, Sum};

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point scalar (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Product
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only for values the type cannot hold,
    /// which never happens for finite literals with `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("index fits in float")
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }

    #[inline]
    fn two() -> Self {
        Self::lit(2.0)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Real for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum
        + Product
        + Default
        + Debug
        + Display
        + LowerExp
        + Send
        + Sync
        + 'static
{
}

/// Complex number over a [`Real`] scalar.
pub type C<T> = Complex<T>;

/// Value type that can be stored in a sampled function: a real scalar or a
/// complex number over it.
pub trait Sample<T: Real>:
    Copy
    + Send
    + Sync
    + Debug
    + PartialEq
    + num_traits::Zero
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Mul<T, Output = Self>
    + std::ops::Div<T, Output = Self>
    + std::ops::AddAssign
    + 'static
{
    fn modulus(self) -> T;
    fn into_complex(self) -> C<T>;
}

impl<T: Real> Sample<T> for T {
    #[inline]
    fn modulus(self) -> T {
        self.abs()
    }
    #[inline]
    fn into_complex(self) -> C<T> {
        C::new(self, T::zero())
    }
}

impl<T: Real> Sample<T> for C<T> {
    #[inline]
    fn modulus(self) -> T {
        self.norm()
    }
    #[inline]
    fn into_complex(self) -> C<T> {
        self
    }
}
