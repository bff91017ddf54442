//! Floating-point abstraction shared by the network code.
//!
//! Production models use `f32` (the checkpoint stores 32-bit floats);
//! gradient checks instantiate the same code with `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
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
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn leaky_relu<F: Real>(x: F, slope: F) -> F {
    if x > F::zero() {
        x
    } else {
        x * slope
    }
}

#[inline]
pub fn leaky_relu_grad<F: Real>(x: F, slope: F) -> F {
    if x > F::zero() {
        F::one()
    } else {
        slope
    }
}

/// Numerically stable two-class softmax, returned as `(p0, p1)`.
pub fn softmax2<F: Real>(a: F, b: F) -> (F, F) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let s = ea + eb;
    (ea / s, eb / s)
}
