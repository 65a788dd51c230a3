//! High-order bound-preserving moving-mesh finite-difference solver for
//! Temple-class 2x2 systems (ARZ traffic flow and sedimentation), on single
//! roads and on road networks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bp;
pub mod error;
pub mod fo_scheme;
pub mod harness;
pub mod integrator;
pub mod mesh;
pub mod model;
pub mod network;
pub mod weno;

#[cfg(test)]
mod test_support;

pub use error::{Error, Result};
pub use mesh::{Boundary, Grid1D, MovingState};
pub use model::{ConservedCell, ModelSpec, Primitive};
