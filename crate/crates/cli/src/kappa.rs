//! Per-cell permeability fields for the porous region.
//!
//! The random field uses ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64(seed)`. Porous cells are visited in increasing cell
//! index; each one draws one `u64`, `r = 2 + 4 * ((x >> 11) * 2^-53)` and
//! `kappa = mu * 10^-r`. Free-flow cells draw nothing and hold 0.

use std::path::Path;

use hdg_core::mesh::{Mesh, Subdomain};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CliError;

/// Endpoints of the exponent interval.
pub const R_MIN: f64 = 2.0;
pub const R_MAX: f64 = 6.0;

/// Stream of exponents `r` in `[2, 6)`.
pub fn exponents(seed: u64) -> impl Iterator<Item = f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::repeat_with(move || {
        let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        R_MIN + (R_MAX - R_MIN) * u
    })
}

pub fn gen_random_kappa(mesh: &Mesh, mu: f64, seed: u64) -> Vec<f64> {
    let mut r = exponents(seed);
    mesh.cells
        .iter()
        .map(|c| match c.subdomain {
            Subdomain::Darcy => mu * 10f64.powf(-r.next().unwrap()),
            Subdomain::Stokes => 0.0,
        })
        .collect()
}

/// Reads one positive value per porous cell (in cell order). Blank lines
/// and lines starting with `#` are skipped.
pub fn read_kappa_file(path: &Path, mesh: &Mesh) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    parse_kappa(&text, mesh).map_err(|m| CliError::Config(format!("{}: {m}", path.display())))
}

pub fn parse_kappa(text: &str, mesh: &Mesh) -> Result<Vec<f64>, String> {
    let mut vals = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: f64 = line.parse().map_err(|e| format!("line {}: {e}", i + 1))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(format!("line {}: permeability must be positive, got {v}", i + 1));
        }
        vals.push(v);
    }
    let nd = mesh.count_subdomain(Subdomain::Darcy);
    if vals.len() != nd {
        return Err(format!("expected {nd} values (one per porous cell), found {}", vals.len()));
    }
    let mut it = vals.into_iter();
    Ok(mesh
        .cells
        .iter()
        .map(|c| if c.subdomain == Subdomain::Darcy { it.next().unwrap() } else { 0.0 })
        .collect())
}

/// Porous-cell values in the `read_kappa_file` format.
pub fn kappa_to_text(mesh: &Mesh, kappa: &[f64]) -> String {
    let mut s = String::from("# permeability per porous cell, in cell order\n");
    for (c, v) in mesh.cells.iter().zip(kappa) {
        if c.subdomain == Subdomain::Darcy {
            s.push_str(&format!("{v:e}\n"));
        }
    }
    s
}
