//! Scalar abstraction shared by every numerical routine.
//!
//! All solvers are generic over [`Real`], a floating-point field with the
//! conversions needed for grid arithmetic and report export. `f32` and `f64`
//! satisfy the bound; `f64` is the intended default and is what the crate
//! root aliases use.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the solvers.
///
/// The bound combines nalgebra's field operations with `num-traits`
/// conversions (`from_f64` for literals and grid fractions, `to_f64` for
/// report export). `Copy + Send + Sync` keeps matrix code and path-parallel
/// simulation loops unconstrained.
pub trait Real: RealField + FromPrimitive + ToPrimitive + Copy + Send + Sync {}

impl<T> Real for T where T: RealField + FromPrimitive + ToPrimitive + Copy + Send + Sync {}

/// Converts a finite `f64` literal into `T`.
///
/// Only used for constants written in source (tolerances, rational grid
/// fractions), which every `Real` type can represent approximately.
pub(crate) fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite f64 literal must convert")
}

/// Converts a grid index into `T`.
pub(crate) fn real_usize<T: Real>(k: usize) -> T {
    T::from_usize(k).expect("grid index must convert")
}

/// Converts an arbitrary document value into `T`, mapping anything the type
/// cannot represent to NaN so that validation reports it instead of the
/// parser panicking.
pub(crate) fn real_lossy<T: Real>(x: f64) -> T {
    T::from_f64(x).unwrap_or_else(|| T::zero() / T::zero())
}
