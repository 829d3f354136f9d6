//! Driver for the coupled Navier-Stokes/Darcy HDG solver: configuration,
//! random permeability, the two experiments, and file export.

pub mod config;
pub mod export;
pub mod kappa;
pub mod run;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{}: {1}", .0.display())]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Solver(#[from] hdg_core::Error),
    #[error("export: {0}")]
    Export(String),
}
