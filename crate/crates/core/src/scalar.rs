//! Scalar abstraction: everything numeric in this crate is generic over [`Real`],
//! which f32 and f64 both satisfy. Concrete aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the quantizer, trainer, losses and metrics operate on.
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + 'static {}

impl<T> Real for T where T: Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + 'static {}

/// Converts an f64 constant into the working scalar type.
///
/// Every constant in this crate (tolerances, defaults, literals like 2.0) fits f32
/// exactly or within rounding, so the conversion cannot fail for supported scalars.
pub(crate) fn real<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 constant must convert into the working scalar type")
}

/// Squared Euclidean distance, accumulated left-to-right in index order.
///
/// The accumulation order is part of the determinism contract: nearest-code
/// searches break ties by index, which is only meaningful if distances are
/// computed identically for every candidate.
pub(crate) fn squared_distance<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc = acc + d * d;
    }
    acc
}

/// Euclidean norm of a vector.
pub(crate) fn norm<F: Real>(v: &[F]) -> F {
    let mut acc = F::zero();
    for &x in v {
        acc = acc + x * x;
    }
    acc.sqrt()
}
