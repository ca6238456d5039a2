//! Numerical laboratory for the relaxed linear micromorphic continuum.
//!
//! The crate discretizes the coupled displacement / micro-distortion system
//! on a structured box with trilinear elements, integrates it in time with an
//! energy-conserving scheme, solves the static resolvent problem, estimates
//! the constants of the coercive inequalities behind well-posedness, and
//! computes plane-wave dispersion branches.

pub mod assembly;
pub mod dispersion;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod inequalities;
pub mod io;
pub mod sparse;
pub mod statics;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::{apply_bc, build_grid, Constraint, DofMap, Grid, NodalField, QuadField};
pub use tensor::{FourthOrderTensor, IsotropicModuli, Material, ModelVariant, Tensor2};
