//! The subcommands. Each writes its outputs and a `manifest.json` into the
//! output directory and returns whether every check passed.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use hdg_core::analysis::{
    conservation_report, error_norms, make_example1, make_polynomial_case, run_convergence_with, ConservationReport,
    ConvergenceReport, KappaChoice, ManufacturedCase,
};
use hdg_core::element::Element;
use hdg_core::fespace::{DiscreteField, SpaceLayout};
use hdg_core::forms::{Permeability, ProblemData};
use hdg_core::mesh::{build_structured_mesh, refine_uniform, BoundarySide, DomainSpec, FacetClass, Mesh, Subdomain};
use hdg_core::solver::picard_solve;
use serde_json::{json, Value};

use crate::config::{Experiment, KappaSelector, RunConfig};
use crate::export::FieldExport;
use crate::kappa::{gen_random_kappa, kappa_to_text, read_kappa_file};
use crate::CliError;

/// Conservation residuals relative to `||u_h||`.
pub const CONSERVATION_TOL: f64 = 1e-9;
/// Net boundary flux relative to `||u_h||` (no sources).
pub const FLUX_BALANCE_TOL: f64 = 1e-8;

pub const CSV_FILE: &str = "convergence.csv";
pub const FIELD_FILE: &str = "solution.field";
pub const VTK_FILE: &str = "solution.vtk";
pub const MESH_FILE: &str = "mesh.vtk";
pub const KAPPA_FILE: &str = "kappa.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    /// Human-readable report lines.
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Unit square cut at `y = 0.6`.
pub fn example2_domain() -> DomainSpec {
    DomainSpec { x: [0.0, 1.0], y: [0.0, 1.0], interface_y: 0.6 }
}

/// Lid and side inflow on the free-flow boundary, no flux through the
/// porous side walls, `p = 2 - x` at the bottom, no sources.
pub fn example2_problem(mu: f64, alpha: f64, beta: f64, kappa: Arc<Vec<f64>>, convection: bool) -> ProblemData {
    let mut data = ProblemData::homogeneous(mu, alpha, beta, Permeability::PerCell(kappa));
    data.g_u = Arc::new(|x| [(PI / 8.0 * (10.0 * x[1] - 6.0)).sin() * (1.0 - x[0] / 5.0), 0.0]);
    data.g_p = Arc::new(|x| 2.0 - x[0]);
    data.pressure_sides = vec![BoundarySide::Bottom];
    data.convection = convection;
    data
}

/// The manufactured solution of a configuration (example1 or custom).
pub fn manufactured_case(cfg: &RunConfig) -> ManufacturedCase {
    let mut case = match cfg.experiment {
        Experiment::Custom => make_polynomial_case(cfg.mu, cfg.alpha),
        _ => {
            let choice = match cfg.kappa_selector() {
                Some(KappaSelector::Kappa2) => KappaChoice::Kappa2,
                _ => KappaChoice::Kappa1,
            };
            make_example1(cfg.mu, choice, cfg.alpha)
        }
    };
    case.convection = cfg.convection;
    case
}

fn domain(cfg: &RunConfig) -> DomainSpec {
    match cfg.experiment {
        Experiment::Example2 => example2_domain(),
        _ => manufactured_case(cfg).domain,
    }
}

/// The mesh `levels - 1` uniform refinements above grid spacing `1 / n`,
/// built the same way as in a convergence study.
pub fn finest_mesh(cfg: &RunConfig) -> Result<Mesh, CliError> {
    let mut mesh = build_structured_mesh(&domain(cfg), cfg.mesh.n)?;
    for _ in 1..cfg.mesh.levels {
        mesh = refine_uniform(&mesh);
    }
    Ok(mesh)
}

pub fn permeability_values(cfg: &RunConfig, mesh: &Mesh) -> Result<Vec<f64>, CliError> {
    match cfg.kappa_selector() {
        Some(KappaSelector::Random) => Ok(gen_random_kappa(mesh, cfg.mu, cfg.seed.expect("validated"))),
        Some(KappaSelector::File) => read_kappa_file(cfg.kappa_file.as_deref().expect("validated"), mesh),
        other => Err(CliError::Config(format!("no per-cell permeability for selector {other:?}"))),
    }
}

fn write(dir: &Path, name: &str, contents: &str, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    let p = dir.join(name);
    std::fs::write(&p, contents).map_err(|e| CliError::Io(p.clone(), e))?;
    files.push(p);
    Ok(())
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, results: Value, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let names: Vec<String> = files.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect();
    let manifest = json!({
        "command": command,
        "versions": { "hdg-cli": env!("CARGO_PKG_VERSION"), "hdg-core": hdg_core::VERSION },
        "config": serde_json::to_value(cfg).expect("config serializes"),
        "outputs": names,
        "results": results,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write(dir, MANIFEST_FILE, &text, files)
}

fn conservation_json(c: &ConservationReport) -> Value {
    json!({
        "divergence": c.divergence,
        "normal_jump": c.normal_jump,
        "interface": c.interface,
        "boundary_flux": c.boundary_flux,
        "velocity_norm": c.velocity_norm,
        "max_relative": c.max_relative(),
    })
}

fn conservation_line(c: &ConservationReport) -> String {
    let s = if c.velocity_norm > 0.0 { c.velocity_norm } else { 1.0 };
    format!(
        "conservation: divergence {:.3e}, normal jump {:.3e}, interface {:.3e} (relative to ||u_h|| = {:.6e})",
        c.divergence / s,
        c.normal_jump / s,
        c.interface / s,
        c.velocity_norm
    )
}

/// Violated thresholds of a convergence report.
pub fn threshold_violations(cfg: &RunConfig, report: &ConvergenceReport) -> Vec<String> {
    let t = &cfg.thresholds;
    let mut v = Vec::new();
    let rates = report.finest_rates();
    for (name, bound, rate) in [
        ("rate_E_u", t.min_rate_e_u, rates[0]),
        ("rate_L2_u", t.min_rate_l2_u, rates[1]),
        ("rate_L2_p", t.min_rate_l2_p, rates[2]),
    ] {
        if let Some(b) = bound {
            match rate {
                Some(r) if r >= b => {}
                Some(r) => v.push(format!("finest {name} = {r:.4} < {b}")),
                None => v.push(format!("finest {name} undefined (need two levels with nonzero errors)")),
            }
        }
    }
    for l in &report.levels {
        if let Some(m) = t.max_picard_iters {
            if !l.converged || l.picard_iters > m {
                v.push(format!("level {}: Picard {} iterations, converged = {} (limit {m})", l.level, l.picard_iters, l.converged));
            }
        }
        if let Some(m) = t.max_conservation {
            let r = l.conservation.max_relative();
            if !(r <= m) {
                v.push(format!("level {}: conservation residual {r:.3e} > {m:e}", l.level));
            }
        }
    }
    v
}

/// Convergence study of a manufactured solution; writes the CSV and the
/// finest-level solution.
pub fn cmd_convergence(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    if cfg.experiment == Experiment::Example2 {
        return Err(CliError::Config("convergence needs experiment = \"example1\" or \"custom\"".into()));
    }
    let case = manufactured_case(cfg);
    let el = Element::with_default_rule(cfg.k);
    let mut finest: Option<(Mesh, DiscreteField)> = None;
    let report = run_convergence_with(
        &case,
        cfg.k,
        cfg.mesh.n,
        cfg.mesh.levels,
        cfg.beta(),
        &cfg.solver_params(),
        |level, mesh, field| {
            if level + 1 == cfg.mesh.levels {
                finest = Some((mesh.clone(), field.clone()));
            }
        },
    )?;
    let (mesh, field) = finest.expect("at least one level");
    let mut files = Vec::new();
    let csv = report.to_csv();
    write(out, CSV_FILE, &csv, &mut files)?;
    write(out, FIELD_FILE, &field.to_text(), &mut files)?;
    let kappa = Permeability::Scalar(case.kappa.clone());
    let export = FieldExport::sample(&mesh, &el, &field, Some(&kappa));
    export.validate(&mesh)?;
    write(out, VTK_FILE, &export.to_vtk(&mesh, &format!("{} k={} mu={}", case.name, cfg.k, cfg.mu)), &mut files)?;
    let mut echo = cfg.clone();
    echo.output_dir = out.to_path_buf();
    write(out, CONFIG_FILE, &echo.to_toml(), &mut files)?;

    let mut lines: Vec<String> = csv.lines().map(String::from).collect();
    for l in &report.levels {
        if !l.converged {
            lines.push(format!("warning: level {} Picard did not converge in {} iterations", l.level, l.picard_iters));
        }
    }
    let violations = threshold_violations(cfg, &report);
    lines.extend(violations.iter().map(|v| format!("threshold violated: {v}")));
    let levels: Vec<Value> = report
        .levels
        .iter()
        .map(|l| {
            json!({
                "level": l.level,
                "h": l.h,
                "dofs": l.dofs,
                "picard_iters": l.picard_iters,
                "converged": l.converged,
                "linear_residual": l.residual,
                "conservation": conservation_json(&l.conservation),
            })
        })
        .collect();
    let results = json!({ "levels": levels, "threshold_violations": violations });
    write_manifest(out, "convergence", &echo, results, &mut files)?;
    Ok(Outcome { passed: violations.is_empty(), lines, files })
}

/// Example 2: one solve with piecewise constant random permeability.
pub fn cmd_example2(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    if cfg.experiment != Experiment::Example2 {
        return Err(CliError::Config("example2 needs experiment = \"example2\"".into()));
    }
    let mesh = finest_mesh(cfg)?;
    let kappa = Arc::new(permeability_values(cfg, &mesh)?);
    let data = example2_problem(cfg.mu, cfg.alpha, cfg.beta(), kappa.clone(), cfg.convection);
    let params = cfg.solver_params();
    let el = Element::with_default_rule(cfg.k);
    let layout = Arc::new(SpaceLayout::new(&mesh, cfg.k, params.with_multiplier()));
    let (field, solve) = picard_solve(&mesh, &layout, &el, &data, &params)?;
    let cons = conservation_report(&mesh, &el, &field, &data);
    let scale = if cons.velocity_norm > 0.0 { cons.velocity_norm } else { 1.0 };
    let flux = cons.boundary_flux / scale;

    let mut files = Vec::new();
    let export = FieldExport::sample(&mesh, &el, &field, Some(&data.kappa));
    export.validate(&mesh)?;
    write(out, VTK_FILE, &export.to_vtk(&mesh, &format!("example2 k={} mu={}", cfg.k, cfg.mu)), &mut files)?;
    write(out, FIELD_FILE, &field.to_text(), &mut files)?;
    write(out, KAPPA_FILE, &kappa_to_text(&mesh, &kappa), &mut files)?;
    let mut echo = cfg.clone();
    echo.output_dir = out.to_path_buf();
    write(out, CONFIG_FILE, &echo.to_toml(), &mut files)?;

    let cons_ok = cons.passes(CONSERVATION_TOL);
    let flux_ok = flux <= FLUX_BALANCE_TOL;
    let mut lines = vec![
        format!(
            "mesh: {} triangles ({} porous), h = {:.6e}, {} dofs",
            mesh.num_cells(),
            mesh.count_subdomain(Subdomain::Darcy),
            mesh.h(),
            layout.total()
        ),
        format!(
            "picard: {} iterations, converged = {}, last relative increment {:.3e}, linear residual {:.3e}",
            solve.iterations,
            solve.converged,
            solve.relative_increments.last().copied().unwrap_or(0.0),
            solve.residual
        ),
        conservation_line(&cons),
        format!("flux balance: |int u_h.n| / ||u_h|| = {flux:.3e} (limit {FLUX_BALANCE_TOL:e})"),
    ];
    if !solve.converged {
        lines.push("warning: Picard iteration did not converge; exported the last iterate".into());
    }
    let results = json!({
        "triangles": mesh.num_cells(),
        "dofs": layout.total(),
        "picard_iters": solve.iterations,
        "picard_converged": solve.converged,
        "relative_increments": solve.relative_increments,
        "linear_residual": solve.residual,
        "conservation": conservation_json(&cons),
        "flux_balance": flux,
        "passed": cons_ok && flux_ok,
    });
    write_manifest(out, "example2", &echo, results, &mut files)?;
    Ok(Outcome { passed: cons_ok && flux_ok, lines, files })
}

/// Re-checks a stored solution: finite coefficients, conservation, and
/// (Example 2) the boundary flux balance or (manufactured cases) the
/// error norms.
pub fn cmd_check(cfg: &RunConfig, field_path: &Path) -> Result<Outcome, CliError> {
    let mesh = finest_mesh(cfg)?;
    let params = cfg.solver_params();
    let el = Element::with_default_rule(cfg.k);
    let layout = Arc::new(SpaceLayout::new(&mesh, cfg.k, params.with_multiplier()));
    let text = std::fs::read_to_string(field_path).map_err(|e| CliError::Io(field_path.to_path_buf(), e))?;
    let field = DiscreteField::from_text(layout, &text)?;
    let mut lines = vec![format!("field: {} coefficients on {} triangles", field.values.len(), mesh.num_cells())];
    let finite = field.values.iter().all(|v| v.is_finite());
    if !finite {
        lines.push("non-finite coefficients".into());
    }
    let (data, case) = match cfg.experiment {
        Experiment::Example2 => {
            let kappa = Arc::new(permeability_values(cfg, &mesh)?);
            (example2_problem(cfg.mu, cfg.alpha, cfg.beta(), kappa, cfg.convection), None)
        }
        _ => {
            let case = manufactured_case(cfg);
            (case.problem_data(cfg.beta()), Some(case))
        }
    };
    let cons = conservation_report(&mesh, &el, &field, &data);
    let mut passed = finite && cons.passes(CONSERVATION_TOL);
    lines.push(conservation_line(&cons));
    lines.push(format!("conservation <= {CONSERVATION_TOL:e}: {}", if cons.passes(CONSERVATION_TOL) { "pass" } else { "FAIL" }));
    match case {
        None => {
            let flux = cons.boundary_flux / cons.velocity_norm.max(f64::MIN_POSITIVE);
            let ok = flux <= FLUX_BALANCE_TOL;
            passed &= ok;
            lines.push(format!("flux balance {flux:.3e} <= {FLUX_BALANCE_TOL:e}: {}", if ok { "pass" } else { "FAIL" }));
        }
        Some(case) => {
            let e = error_norms(&case, &mesh, &el, &field)?;
            lines.push(format!(
                "errors: E(u) {:.6e}, L2(u) {:.6e}, L2(p) {:.6e}",
                e.err_e_u, e.err_l2_u, e.err_l2_p
            ));
        }
    }
    Ok(Outcome { passed, lines, files: Vec::new() })
}

/// Writes the (finest) mesh of a configuration with its subdomain tags.
pub fn cmd_mesh_dump(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let mesh = finest_mesh(cfg)?;
    let mut files = Vec::new();
    write(out, MESH_FILE, &mesh.to_vtk(), &mut files)?;
    let classes = [
        ("interior_s", FacetClass::InteriorS),
        ("interior_d", FacetClass::InteriorD),
        ("interface", FacetClass::Interface),
        ("exterior_s", FacetClass::ExteriorS),
        ("exterior_d", FacetClass::ExteriorD),
    ];
    let mut lines = vec![format!(
        "{} vertices, {} triangles ({} free flow, {} porous), h = {:.6e}",
        mesh.vertices.len(),
        mesh.num_cells(),
        mesh.count_subdomain(Subdomain::Stokes),
        mesh.count_subdomain(Subdomain::Darcy),
        mesh.h()
    )];
    let mut facets = serde_json::Map::new();
    for (name, class) in classes {
        let n = mesh.count_class(class);
        lines.push(format!("{name}: {n} facets"));
        facets.insert(name.into(), json!(n));
    }
    let results = json!({
        "vertices": mesh.vertices.len(),
        "triangles": mesh.num_cells(),
        "free_flow_triangles": mesh.count_subdomain(Subdomain::Stokes),
        "porous_triangles": mesh.count_subdomain(Subdomain::Darcy),
        "h": mesh.h(),
        "facets": facets,
    });
    let mut echo = cfg.clone();
    echo.output_dir = out.to_path_buf();
    write_manifest(out, "mesh-dump", &echo, results, &mut files)?;
    Ok(Outcome { passed: true, lines, files })
}
