//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use hdg_core::solver::{InitialGuess, PressureConstraint, SolverParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "HDG_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// Manufactured smooth solution on `[0, 1] x [-1, 1]`.
    Example1,
    /// Lid-driven channel over a porous bed with random permeability.
    Example2,
    /// Polynomial manufactured solution that the discretization
    /// reproduces exactly (consistency check).
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaSelector {
    Kappa1,
    Kappa2,
    Random,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialGuessConfig {
    Zero,
    StokesDarcy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    /// Grid spacing `1 / n` of the coarsest (or only) mesh.
    pub n: usize,
    /// Number of meshes in a convergence study, each a uniform refinement
    /// of the previous one.
    #[serde(default = "default_levels")]
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_max_iter")]
    pub picard_max_iter: usize,
    #[serde(default = "default_true")]
    pub condense: bool,
    #[serde(default = "default_guess")]
    pub initial_guess: InitialGuessConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            picard_tol: default_tol(),
            picard_max_iter: default_max_iter(),
            condense: true,
            initial_guess: default_guess(),
        }
    }
}

/// Limits checked by `convergence`; any violation makes the command exit
/// with a nonzero status.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_rate_e_u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_rate_l2_u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_rate_l2_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_picard_iters: Option<usize>,
    /// Bound on the conservation residuals relative to `||u_h||`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_conservation: Option<f64>,
}

impl Thresholds {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub k: usize,
    /// Interior penalty; `8 k^2` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub mu: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Permeability; `kappa1` for example1, `random` for example2.
    /// Not allowed for `custom`, which uses `kappa = 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<KappaSelector>,
    /// One value per porous cell, in cell order (`kappa = "file"`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_file: Option<PathBuf>,
    /// Convection in the free-flow region; on by default.
    #[serde(default = "default_true")]
    pub convection: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub mesh: MeshConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Thresholds::is_empty")]
    pub thresholds: Thresholds,
}

fn default_levels() -> usize {
    1
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    50
}
fn default_true() -> bool {
    true
}
fn default_guess() -> InitialGuessConfig {
    InitialGuessConfig::StokesDarcy
}
fn default_alpha() -> f64 {
    1.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Defaults for an experiment: the Example 1 study starts at `n = 4`
    /// with four levels, Example 2 runs a single `n = 65` mesh
    /// (8450 triangles).
    pub fn defaults(experiment: Experiment) -> Self {
        let (k, mu, kappa, seed, mesh) = match experiment {
            Experiment::Example1 => (1, 0.1, Some(KappaSelector::Kappa1), None, MeshConfig { n: 4, levels: 4 }),
            Experiment::Example2 => (2, 1.0, Some(KappaSelector::Random), Some(1), MeshConfig { n: 65, levels: 1 }),
            Experiment::Custom => (2, 1.0, None, None, MeshConfig { n: 2, levels: 3 }),
        };
        Self {
            experiment,
            k,
            beta: None,
            mu,
            alpha: 1.0,
            kappa,
            kappa_file: None,
            convection: true,
            seed,
            output_dir: default_output_dir(),
            mesh,
            solver: SolverConfig::default(),
            thresholds: Thresholds::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(8.0 * (self.k * self.k) as f64)
    }

    pub fn kappa_selector(&self) -> Option<KappaSelector> {
        self.kappa.or(match self.experiment {
            Experiment::Example1 => Some(KappaSelector::Kappa1),
            Experiment::Example2 => Some(KappaSelector::Random),
            Experiment::Custom => None,
        })
    }

    /// Grid parameter of the finest mesh the configuration produces.
    pub fn finest_n(&self) -> usize {
        self.mesh.n << (self.mesh.levels - 1)
    }

    pub fn solver_params(&self) -> SolverParams {
        SolverParams {
            picard_tol: self.solver.picard_tol,
            picard_max_iter: self.solver.picard_max_iter,
            condense: self.solver.condense,
            initial_guess: match self.solver.initial_guess {
                InitialGuessConfig::Zero => InitialGuess::Zero,
                InitialGuessConfig::StokesDarcy => InitialGuess::StokesDarcy,
            },
            constraint: match self.experiment {
                Experiment::Example2 => PressureConstraint::PressureBc,
                _ => PressureConstraint::Multiplier,
            },
        }
    }

    /// `output_dir`, unless overridden by `HDG_OUTPUT_DIR`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(1..=3).contains(&self.k) {
            return bad(format!("k must be 1, 2 or 3, got {}", self.k));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be positive, got {}", self.mu));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("beta must be positive, got {b}"));
            }
        }
        if self.mesh.n == 0 || self.mesh.levels == 0 {
            return bad("mesh.n and mesh.levels must be at least 1".into());
        }
        if self.mesh.levels > 8 {
            return bad(format!("mesh.levels = {} is too many", self.mesh.levels));
        }
        if !(self.solver.picard_tol > 0.0) || self.solver.picard_max_iter == 0 {
            return bad("solver.picard_tol must be positive and solver.picard_max_iter at least 1".into());
        }
        match (self.experiment, self.kappa_selector()) {
            (Experiment::Example1, Some(KappaSelector::Kappa1 | KappaSelector::Kappa2)) => {}
            (Experiment::Example1, Some(s)) => {
                return bad(format!("example1 needs kappa = \"kappa1\" or \"kappa2\", got {s:?}"));
            }
            (Experiment::Example2, Some(KappaSelector::Random | KappaSelector::File)) => {}
            (Experiment::Example2, Some(s)) => {
                return bad(format!("example2 needs kappa = \"random\" or \"file\", got {s:?}"));
            }
            (Experiment::Custom, None) => {}
            (Experiment::Custom, Some(_)) => return bad("custom uses kappa = 1; remove the kappa key".into()),
            (_, None) => unreachable!(),
        }
        if self.kappa_selector() == Some(KappaSelector::Random) && self.seed.is_none() {
            return bad("seed is required when kappa = \"random\"".into());
        }
        if (self.kappa_selector() == Some(KappaSelector::File)) != self.kappa_file.is_some() {
            return bad("kappa_file must be given exactly when kappa = \"file\"".into());
        }
        if self.experiment == Experiment::Example2 {
            // the interface at y = 0.6 must lie on a grid line
            if self.mesh.n % 5 != 0 {
                return bad(format!("example2 needs mesh.n divisible by 5, got {}", self.mesh.n));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
experiment = "example1"
k = 2
beta = 40.0
mu = 0.001
alpha = 0.5
kappa = "kappa2"
convection = false
output_dir = "runs/a"

[mesh]
n = 4
levels = 3

[solver]
picard_tol = 1e-9
picard_max_iter = 30
condense = false
initial_guess = "zero"

[thresholds]
min_rate_e_u = 1.8
max_picard_iters = 25
"#;

    #[test]
    fn parse_and_round_trip() {
        let cfg = RunConfig::from_toml(FULL).unwrap();
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.kappa, Some(KappaSelector::Kappa2));
        assert_eq!(cfg.solver.initial_guess, InitialGuessConfig::Zero);
        assert_eq!(cfg.thresholds.max_picard_iters, Some(25));
        assert_eq!(cfg.finest_n(), 16);
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        for e in [Experiment::Example1, Experiment::Example2, Experiment::Custom] {
            let d = RunConfig::defaults(e);
            d.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&d.to_toml()).unwrap(), d);
        }
    }

    #[test]
    fn defaults_are_filled() {
        let cfg = RunConfig::from_toml("experiment = \"example1\"\nk = 3\nmu = 0.1\n[mesh]\nn = 2\n").unwrap();
        assert_eq!(cfg.beta(), 72.0);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.mesh.levels, 1);
        assert_eq!(cfg.kappa_selector(), Some(KappaSelector::Kappa1));
        assert_eq!(cfg.solver, SolverConfig::default());
        assert!(cfg.convection);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = FULL.replace("alpha = 0.5", "alpha = 0.5\ngamma = 1");
        assert!(matches!(RunConfig::from_toml(&text), Err(CliError::Config(_))));
        let text = FULL.replace("condense = false", "condense = false\nsmoother = \"jacobi\"");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let base = RunConfig::defaults(Experiment::Example2);
        let mut c = base.clone();
        c.seed = None;
        assert!(c.validate().is_err(), "random kappa without seed");
        let mut c = base.clone();
        c.k = 4;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.mesh.n = 64;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.kappa = Some(KappaSelector::Kappa1);
        assert!(c.validate().is_err());
        let mut c = base;
        c.kappa = Some(KappaSelector::File);
        assert!(c.validate().is_err(), "file selector without a path");
        let mut c = RunConfig::defaults(Experiment::Custom);
        c.kappa = Some(KappaSelector::Kappa1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn solver_params_follow_experiment() {
        assert_eq!(RunConfig::defaults(Experiment::Example2).solver_params().constraint, PressureConstraint::PressureBc);
        assert_eq!(RunConfig::defaults(Experiment::Example1).solver_params().constraint, PressureConstraint::Multiplier);
    }
}
