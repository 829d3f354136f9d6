use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdg_cli::config::{Experiment, InitialGuessConfig, KappaSelector, RunConfig};
use hdg_cli::run::{cmd_check, cmd_convergence, cmd_example2, cmd_mesh_dump, Outcome};
use hdg_cli::CliError;

#[derive(Parser)]
#[command(name = "nsd-hdg", version, about = "HDG solver for coupled Navier-Stokes/Darcy flow")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convergence study of a manufactured solution; writes convergence.csv.
    Convergence(RunArgs),
    /// Channel over a porous bed with random permeability; writes solution.vtk.
    Example2(RunArgs),
    /// Re-run the conservation and error checks on a stored solution.
    Check {
        #[command(flatten)]
        run: RunArgs,
        /// Stored solution (solution.field).
        #[arg(long)]
        field: PathBuf,
    },
    /// Write the mesh of a configuration as VTK.
    MeshDump(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Example1,
    Example2,
    Custom,
}

#[derive(Clone, Copy, ValueEnum)]
enum KappaArg {
    Kappa1,
    Kappa2,
    Random,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum GuessArg {
    Zero,
    StokesDarcy,
}

/// Flags override the corresponding keys of the config file.
#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    experiment: Option<ExperimentArg>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    kappa: Option<KappaArg>,
    #[arg(long)]
    kappa_file: Option<PathBuf>,
    #[arg(long)]
    convection: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid spacing 1/n of the coarsest mesh.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    picard_tol: Option<f64>,
    #[arg(long)]
    picard_max_iter: Option<usize>,
    #[arg(long)]
    condense: Option<bool>,
    #[arg(long, value_enum)]
    initial_guess: Option<GuessArg>,
    /// Output directory; overrides HDG_OUTPUT_DIR and the config file.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self, default: Experiment) -> Result<(RunConfig, PathBuf), CliError> {
        let experiment = self.experiment.map(|e| match e {
            ExperimentArg::Example1 => Experiment::Example1,
            ExperimentArg::Example2 => Experiment::Example2,
            ExperimentArg::Custom => Experiment::Custom,
        });
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::defaults(experiment.unwrap_or(default)),
        };
        if let Some(e) = experiment {
            if e != cfg.experiment && self.config.is_some() {
                return Err(CliError::Config(format!("--experiment conflicts with the config file ({:?})", cfg.experiment)));
            }
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set!(k => k, mu => mu, alpha => alpha, convection => convection, n => mesh.n, levels => mesh.levels,
             picard_tol => solver.picard_tol, picard_max_iter => solver.picard_max_iter,
             condense => solver.condense);
        if self.beta.is_some() {
            cfg.beta = self.beta;
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.kappa_file.is_some() {
            cfg.kappa_file = self.kappa_file.clone();
        }
        if let Some(k) = self.kappa {
            cfg.kappa = Some(match k {
                KappaArg::Kappa1 => KappaSelector::Kappa1,
                KappaArg::Kappa2 => KappaSelector::Kappa2,
                KappaArg::Random => KappaSelector::Random,
                KappaArg::File => KappaSelector::File,
            });
        }
        if let Some(g) = self.initial_guess {
            cfg.solver.initial_guess = match g {
                GuessArg::Zero => InitialGuessConfig::Zero,
                GuessArg::StokesDarcy => InitialGuessConfig::StokesDarcy,
            };
        }
        let out = self.output_dir.clone().unwrap_or_else(|| cfg.resolved_output_dir());
        cfg.output_dir = out.clone();
        cfg.validate()?;
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.cmd {
        Command::Convergence(a) => {
            let (cfg, out) = a.resolve(Experiment::Example1)?;
            cmd_convergence(&cfg, &out)
        }
        Command::Example2(a) => {
            let (cfg, out) = a.resolve(Experiment::Example2)?;
            cmd_example2(&cfg, &out)
        }
        Command::Check { run, field } => {
            let (cfg, _) = run.resolve(Experiment::Example1)?;
            cmd_check(&cfg, &field)
        }
        Command::MeshDump(a) => {
            let (cfg, out) = a.resolve(Experiment::Example1)?;
            cmd_mesh_dump(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: could not set up {t} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(outcome) => {
            for l in &outcome.lines {
                println!("{l}");
            }
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("checks failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
