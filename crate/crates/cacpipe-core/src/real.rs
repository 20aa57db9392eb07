//! Float abstraction so every algorithm runs in `f32` (production) or `f64`
//! (the gradient-check replica) from one code path.
//!
//! Under `no_std` the transcendental functions route through `libm`; with the
//! `std` feature they use the intrinsics-backed std implementations. Both give
//! correctly rounded-enough results for the documented tolerances.

use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar type the network engine is generic over.
pub trait Real:
    Copy
    + PartialOrd
    + Debug
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;

    fn maximum(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
    fn minimum(self, other: Self) -> Self {
        if self < other {
            self
        } else {
            other
        }
    }
    fn is_finite(self) -> bool;
}

macro_rules! real_impl {
    ($t:ty, $exp:path, $ln:path, $tanh:path, $sqrt:path, $abs:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[inline(always)]
            fn exp(self) -> Self {
                #[cfg(feature = "std")]
                {
                    self.exp()
                }
                #[cfg(not(feature = "std"))]
                {
                    $exp(self)
                }
            }
            #[inline(always)]
            fn ln(self) -> Self {
                #[cfg(feature = "std")]
                {
                    self.ln()
                }
                #[cfg(not(feature = "std"))]
                {
                    $ln(self)
                }
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                #[cfg(feature = "std")]
                {
                    self.tanh()
                }
                #[cfg(not(feature = "std"))]
                {
                    $tanh(self)
                }
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                #[cfg(feature = "std")]
                {
                    self.sqrt()
                }
                #[cfg(not(feature = "std"))]
                {
                    $sqrt(self)
                }
            }
            #[inline(always)]
            fn abs(self) -> Self {
                #[cfg(feature = "std")]
                {
                    self.abs()
                }
                #[cfg(not(feature = "std"))]
                {
                    $abs(self)
                }
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

real_impl!(f32, libm::expf, libm::logf, libm::tanhf, libm::sqrtf, libm::fabsf);
real_impl!(f64, libm::exp, libm::log, libm::tanh, libm::sqrt, libm::fabs);

/// `f64` math that works identically with and without `std`.
///
/// Non-generic code (geometry, statistics, the phantom generator) calls these
/// instead of inherent float methods so the crate stays `no_std`-buildable.
pub mod f64math {
    #[inline(always)]
    pub fn exp(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.exp()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::exp(x)
        }
    }
    #[inline(always)]
    pub fn ln(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.ln()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::log(x)
        }
    }
    #[inline(always)]
    pub fn abs(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.abs()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::fabs(x)
        }
    }
    #[inline(always)]
    pub fn tanh(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.tanh()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::tanh(x)
        }
    }
    #[inline(always)]
    pub fn sqrt(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.sqrt()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::sqrt(x)
        }
    }
    #[inline(always)]
    pub fn sin(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.sin()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::sin(x)
        }
    }
    #[inline(always)]
    pub fn cos(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.cos()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::cos(x)
        }
    }
    #[inline(always)]
    pub fn acos(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.acos()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::acos(x)
        }
    }
    #[inline(always)]
    pub fn floor(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.floor()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::floor(x)
        }
    }
    #[inline(always)]
    pub fn ceil(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.ceil()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::ceil(x)
        }
    }
    #[inline(always)]
    pub fn round(x: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.round()
        }
        #[cfg(not(feature = "std"))]
        {
            libm::round(x)
        }
    }
    #[inline(always)]
    pub fn powf(x: f64, y: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.powf(y)
        }
        #[cfg(not(feature = "std"))]
        {
            libm::pow(x, y)
        }
    }
    #[inline(always)]
    pub fn hypot(x: f64, y: f64) -> f64 {
        #[cfg(feature = "std")]
        {
            x.hypot(y)
        }
        #[cfg(not(feature = "std"))]
        {
            libm::hypot(x, y)
        }
    }
}
