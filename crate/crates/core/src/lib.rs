//! Ball-bases, sparse operators of weak and strong type, and the covering,
//! disjointification and flattening constructions behind their weak-type
//! bounds, on finite measure spaces with exact rational arithmetic.

pub mod basis;
pub mod constructions;
pub mod harness;
pub mod measure;
pub mod rational;
pub mod sparse;

pub use basis::{dyadic_basis, martingale_basis, Ball, BallBasis, BallId, BasisError, MartingaleTree};
pub use measure::{CellId, CellSpace, MeasurableSet, MeasureError, Remap, StepFunction};
pub use rational::{RatioStr, Rational, RootSum};
