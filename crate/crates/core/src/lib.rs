//! Strongly conservative hybridizable discontinuous Galerkin (HDG)
//! discretization of coupled Navier-Stokes / Darcy flow in two dimensions,
//! with Beavers-Joseph-Saffman coupling on the interface.

pub mod analysis;
pub mod element;
pub mod error;
pub mod fespace;
pub mod forms;
pub mod mesh;
pub mod polybasis;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
