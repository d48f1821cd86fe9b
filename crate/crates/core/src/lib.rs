//! Manufacturability-aware voxel generation and analysis for additive
//! manufacturing.
//!
//! The crate covers the full path from a latent code to a printable part:
//! a four-block upsampling decoder ([`decoder`]), hard printability checks and
//! repair ([`constraints`]), the VAE training loop with differentiable
//! constraint penalties ([`training`]), and grid/mesh persistence ([`meshio`]).

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod constraints;
pub mod decoder;
pub mod error;
pub mod grid;
pub mod meshio;
pub mod training;

pub use constraints::{evaluate, repair, ConstraintReport, RepairOptions};
pub use error::{Error, Result};
pub use grid::{PrintabilitySpec, ProbGrid, VoxelGrid};
