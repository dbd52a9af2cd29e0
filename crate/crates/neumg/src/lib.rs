//! Multigrid transfer operators for P1 finite elements, built two ways:
//! exactly by L2-projection between unrelated meshes, and approximately by
//! small per-patch neural networks trained on mass-matrix data.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod fem;
pub mod l2proj;
pub mod mesh;
pub mod multigrid;
pub mod nn;
pub mod sparse;

pub use error::{Error, Result};
