//! Flat sup-convolutions and feeble viscosity checks for minimizers of
//! convex integral functionals with radial, possibly nonsmooth integrands.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod canonical;
pub mod error;
pub mod flatness;
pub mod grid;
pub mod hamiltonian;
pub mod jets;
pub mod monotone;
pub mod pipeline;
pub mod quadrature;
pub mod solver;
pub mod supconv;

pub use error::{Error, Result};
pub use flatness::{FlatKernel, KernelParams, TableSpec};
pub use grid::{Grid, SampledFunction, SimplexMesh};
pub use hamiltonian::{Hamiltonian, Model, SingularSet};
pub use jets::{Jet, ProbeOptions, ProbeSet, VerifyOptions, VerifyReport};
pub use monotone::{Direction, MonotoneMap};
