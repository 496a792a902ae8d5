//! Cubelet occupancy worlds: boids simulation over static terrain,
//! multi-resolution voxelization, lattice graphs over cubelets, forecasting
//! baselines and evaluation.

pub mod baselines;
pub mod discretize;
pub mod error;
pub mod eval;
pub mod formats;
pub mod graph;
pub mod sim;
pub mod terrain;
pub mod world;

pub use error::{Error, Result};
