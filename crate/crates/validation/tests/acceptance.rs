//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use hdg_cli::config::{Experiment, KappaSelector, RunConfig};
use hdg_cli::run::{cmd_convergence, cmd_example2, CSV_FILE, KAPPA_FILE, MANIFEST_FILE, VTK_FILE};
use hdg_core::analysis::{make_example1, run_convergence, ConvergenceReport, KappaChoice};
use hdg_core::element::Element;
use hdg_core::fespace::{bdm_interpolate, SpaceLayout};
use hdg_core::forms::ProblemData;
use hdg_core::mesh::{build_structured_mesh, refine_uniform, DomainSpec, Point};
use hdg_core::solver::{assemble_global, picard_solve, solve_condensed, solve_linear, SolverParams};
use rand::{Rng, SeedableRng};
use serde_json::Value;

const MUS: [f64; 2] = [1e-1, 1e-3];

struct Criterion {
    id: usize,
    name: &'static str,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Criterion {
    fn new(id: usize, name: &'static str) -> Self {
        Self { id, name, failures: Vec::new(), notes: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: String) {
        if !ok {
            self.failures.push(what);
        }
    }

    fn report(&self) -> bool {
        let status = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        let detail = if self.failures.is_empty() { self.notes.join("; ") } else { self.failures.join("; ") };
        println!("criterion {} [{}] {}: {}", self.id, status, self.name, detail);
        if !self.failures.is_empty() {
            println!("    measured: {}", self.notes.join("; "));
        }
        self.failures.is_empty()
    }
}

fn fmt_rate(r: Option<f64>) -> String {
    r.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

// ---------------------------------------------------------------------------
// 1. BDM moments and polynomial reproduction

fn criterion1() -> Criterion {
    let mut c = Criterion::new(1, "BDM interpolation properties");
    let start = Instant::now();
    let quad = 16;
    let mesh = refine_uniform(&build_structured_mesh(&DomainSpec::new([0.0, 1.0], [-1.0, 1.0], 0.0).unwrap(), 2).unwrap());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let (mut moment_max, mut poly_max) = (0.0f64, 0.0f64);
    for k in 1..=3 {
        let el = Element::new(k, quad);
        let nk = el.n_vel();
        let eval = |b: &[f64], phi: &[f64]| -> [f64; 2] { std::array::from_fn(|a| (0..nk).map(|i| b[a * nk + i] * phi[i]).sum()) };
        for _ in 0..5 {
            let p: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
            let u = move |x: Point| [(p[0] * x[0] + p[1] * x[1]).sin(), (p[2] * x[0] * x[1]).cos() + p[3] * x[0]];
            let div = move |x: Point| p[0] * (p[0] * x[0] + p[1] * x[1]).cos() - p[2] * x[0] * (p[2] * x[0] * x[1]).sin();
            let pi = bdm_interpolate(&mesh, k, quad, |_, x| u(x)).unwrap();
            for cell in 0..mesh.num_cells() {
                let b = pi.block(cell);
                for local in 0..3 {
                    let qps = el.facet_qps(&mesh, cell, local);
                    for j in 0..el.n_trace() {
                        let r: f64 = qps
                            .iter()
                            .map(|qp| {
                                let (e, v) = (u(qp.x), eval(b, &qp.phi));
                                qp.w * qp.mu[j] * ((e[0] - v[0]) * qp.n[0] + (e[1] - v[1]) * qp.n[1])
                            })
                            .sum();
                        moment_max = moment_max.max(r.abs());
                    }
                }
                let qps = el.cell_qps(&mesh, cell);
                for q in 0..el.n_pres() {
                    let r: f64 = qps
                        .iter()
                        .map(|qp| {
                            let dv: f64 = (0..nk).map(|i| b[i] * qp.grad[i][0] + b[nk + i] * qp.grad[i][1]).sum();
                            qp.w * qp.psi[q] * (div(qp.x) - dv)
                        })
                        .sum();
                    moment_max = moment_max.max(r.abs());
                }
            }
        }
        for d in 0..=k {
            let poly = move |x: Point| [(x[0] - 0.3 * x[1]).powi(d as i32) + 1.0, (0.5 * x[0] + x[1]).powi(d as i32) - x[0]];
            let pi = bdm_interpolate(&mesh, k, quad, |_, x| poly(x)).unwrap();
            for cell in 0..mesh.num_cells() {
                for qp in el.cell_qps(&mesh, cell) {
                    let (e, v) = (poly(qp.x), eval(pi.block(cell), &qp.phi));
                    poly_max = poly_max.max((e[0] - v[0]).abs()).max((e[1] - v[1]).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    c.check(moment_max <= 1e-11, format!("moment residual {moment_max:.2e} > 1e-11"));
    c.check(poly_max <= 1e-12, format!("polynomial reproduction error {poly_max:.2e} > 1e-12"));
    c.check(secs < 10.0, format!("runtime {secs:.1}s >= 10s"));
    c.notes.push(format!("moment residual {moment_max:.1e}, polynomial error {poly_max:.1e}, {secs:.1}s"));
    c
}

// ---------------------------------------------------------------------------
// Example 1 sweeps shared by criteria 2, 3, 4, 5, 7

struct Sweep {
    k: usize,
    mu: f64,
    report: ConvergenceReport,
    secs: f64,
}

fn sweep(kappa: KappaChoice, k: usize, mu: f64) -> Sweep {
    let start = Instant::now();
    let case = make_example1(mu, kappa, 1.0);
    let report = run_convergence(&case, k, 4, 4, ProblemData::default_beta(k), &SolverParams::default()).unwrap();
    let s = Sweep { k, mu, report, secs: start.elapsed().as_secs_f64() };
    eprintln!("  swept {kappa:?} k={k} mu={mu:e} in {:.0}s", s.secs);
    s
}

fn criterion3(sweeps: &[Sweep]) -> Criterion {
    let mut c = Criterion::new(3, "convergence rates (kappa1, h = 1/4 .. 1/32)");
    for s in sweeps {
        let [e, l2u, p] = s.report.finest_rates();
        let k = s.k as f64;
        let tag = format!("k={} mu={:e}", s.k, s.mu);
        c.check(e.is_some_and(|r| r >= k - 0.2), format!("{tag}: E rate {} < {:.1}", fmt_rate(e), k - 0.2));
        c.check(p.is_some_and(|r| r >= k - 0.2), format!("{tag}: L2 p rate {} < {:.1}", fmt_rate(p), k - 0.2));
        if s.k >= 2 {
            c.check(l2u.is_some_and(|r| r >= k + 0.8), format!("{tag}: L2 u rate {} < {:.1}", fmt_rate(l2u), k + 0.8));
        }
        c.notes.push(format!("{tag} E {} L2u {} L2p {} ({:.0}s)", fmt_rate(e), fmt_rate(l2u), fmt_rate(p), s.secs));
    }
    c
}

fn criterion4(sweeps: &[Sweep]) -> Criterion {
    let mut c = Criterion::new(4, "pressure robustness (mu = 1e-1 vs 1e-3)");
    for k in 1..=3 {
        let find = |mu: f64| sweeps.iter().find(|s| s.k == k && s.mu == mu).unwrap();
        let (a, b) = (find(MUS[0]), find(MUS[1]));
        let mut ue = Vec::new();
        let mut pr = Vec::new();
        for (la, lb) in a.report.levels.iter().zip(&b.report.levels) {
            let (ea, eb) = (la.errors.err_e_u, lb.errors.err_e_u);
            let ru = ea.max(eb) / ea.min(eb);
            let rp = lb.errors.err_l2_p / la.errors.err_l2_p;
            c.check(ru <= 2.0, format!("k={k} level {}: E velocity ratio {ru:.2} > 2", la.level));
            c.check((50.0..=200.0).contains(&rp), format!("k={k} level {}: pressure ratio {rp:.1} outside [50, 200]", la.level));
            ue.push(format!("{ru:.2}"));
            pr.push(format!("{rp:.1}"));
        }
        c.notes.push(format!("k={k} E ratios [{}] p ratios [{}]", ue.join(" "), pr.join(" ")));
    }
    c
}

fn criterion5(k1: &[Sweep], k2: &[Sweep]) -> Criterion {
    let mut c = Criterion::new(5, "kappa2 velocity error exceeds kappa1 (k=2)");
    for s2 in k2 {
        let s1 = k1.iter().find(|s| s.k == s2.k && s.mu == s2.mu).unwrap();
        for (a, b) in s1.report.levels.iter().zip(&s2.report.levels) {
            c.check(
                b.errors.err_e_u > a.errors.err_e_u,
                format!("mu={:e} level {}: {:.3e} <= {:.3e}", s2.mu, a.level, b.errors.err_e_u, a.errors.err_e_u),
            );
        }
        let last = s1.report.levels.len() - 1;
        c.notes.push(format!(
            "mu={:e} finest E error {:.3e} (kappa2) vs {:.3e} (kappa1)",
            s2.mu, s2.report.levels[last].errors.err_e_u, s1.report.levels[last].errors.err_e_u
        ));
    }
    c
}

// ---------------------------------------------------------------------------
// 6. Static condensation

fn criterion6() -> Criterion {
    let mut c = Criterion::new(6, "static condensation equivalence (h = 1/4)");
    for k in 1..=2 {
        let case = make_example1(MUS[0], KappaChoice::Kappa1, 1.0);
        let mesh = build_structured_mesh(&case.domain, 4).unwrap();
        let data = case.problem_data(ProblemData::default_beta(k));
        let el = Element::with_default_rule(k);
        let layout = Arc::new(SpaceLayout::new(&mesh, k, true));
        let (w, _) = picard_solve(&mesh, &layout, &el, &data, &SolverParams::default()).unwrap();
        let mut worst = 0.0f64;
        for wind in [None, Some(&w)] {
            let sys = assemble_global(&mesh, &layout, &el, &data, wind).unwrap();
            let (full, _) = solve_linear(&sys).unwrap();
            let (cond, _) = solve_condensed(&sys).unwrap();
            let d = full.values.iter().zip(&cond.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(d);
        }
        c.check(worst <= 1e-8, format!("k={k}: max difference {worst:.2e} > 1e-8"));
        c.notes.push(format!("k={k} max difference {worst:.1e}"));
    }
    c
}

// ---------------------------------------------------------------------------
// 7. Picard

fn criterion7(sweeps: &[Sweep]) -> Criterion {
    let mut c = Criterion::new(7, "Picard iteration");
    for k in 1..=3 {
        let mut case = make_example1(MUS[0], KappaChoice::Kappa1, 1.0);
        case.convection = false;
        let mesh = build_structured_mesh(&case.domain, 4).unwrap();
        let data = case.problem_data(ProblemData::default_beta(k));
        let layout = Arc::new(SpaceLayout::new(&mesh, k, true));
        let (_, rep) = picard_solve(&mesh, &layout, &Element::with_default_rule(k), &data, &SolverParams::default()).unwrap();
        c.check(rep.iterations == 1, format!("convection off, k={k}: {} iterations", rep.iterations));
    }
    for s in sweeps {
        let iters: Vec<String> = s.report.levels.iter().map(|l| l.picard_iters.to_string()).collect();
        for l in &s.report.levels {
            c.check(
                l.converged && l.picard_iters <= 25,
                format!("k={} mu={:e} level {}: {} iterations (converged {})", s.k, s.mu, l.level, l.picard_iters, l.converged),
            );
        }
        c.notes.push(format!("k={} mu={:e} iterations [{}]", s.k, s.mu, iters.join(" ")));
    }
    c
}

// ---------------------------------------------------------------------------
// 8. Example 2 at reduced scale

struct Example2Run {
    mu: f64,
    manifest: Value,
    secs: f64,
}

fn example2_config(mu: f64, n: usize, seed: u64, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::defaults(Experiment::Example2);
    cfg.mu = mu;
    cfg.mesh.n = n;
    cfg.seed = Some(seed);
    cfg.output_dir = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

fn run_example2(mu: f64, dir: &Path) -> Example2Run {
    let start = Instant::now();
    let out = dir.join(format!("example2-mu{mu}"));
    cmd_example2(&example2_config(mu, 65, 1, &out), &out).unwrap();
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    eprintln!("  example2 mu={mu:e} in {secs:.0}s");
    Example2Run { mu, manifest, secs }
}

fn criterion8(runs: &[Example2Run]) -> Criterion {
    let mut c = Criterion::new(8, "Example 2 at reduced scale (k=2, random kappa)");
    for r in runs {
        let res = &r.manifest["results"];
        let triangles = res["triangles"].as_u64().unwrap();
        let cons = res["conservation"]["max_relative"].as_f64().unwrap();
        let flux = res["flux_balance"].as_f64().unwrap();
        let converged = res["picard_converged"].as_bool().unwrap();
        let tag = format!("mu={:e}", r.mu);
        c.check(converged, format!("{tag}: Picard did not converge"));
        c.check(cons <= 1e-9, format!("{tag}: conservation {cons:.2e} > 1e-9"));
        c.check(flux <= 1e-8, format!("{tag}: flux balance {flux:.2e} > 1e-8"));
        c.notes.push(format!(
            "{tag} {triangles} triangles, {} Picard iterations, conservation {cons:.1e}, flux {flux:.1e} ({:.0}s)",
            res["picard_iters"], r.secs
        ));
    }
    c
}

// ---------------------------------------------------------------------------
// 2. Conservation over every solve above

fn criterion2(sweeps: &[&Sweep], runs: &[Example2Run]) -> Criterion {
    let mut c = Criterion::new(2, "conservation (divergence, normal jump, interface)");
    let mut worst = 0.0f64;
    let mut count = 0;
    for s in sweeps {
        for l in &s.report.levels {
            let r = l.conservation.max_relative();
            worst = worst.max(r);
            count += 1;
            c.check(r <= 1e-9, format!("example1 k={} mu={:e} level {}: {r:.2e}", s.k, s.mu, l.level));
        }
    }
    for r in runs {
        let v = r.manifest["results"]["conservation"]["max_relative"].as_f64().unwrap();
        worst = worst.max(v);
        count += 1;
        c.check(v <= 1e-9, format!("example2 mu={:e}: {v:.2e}", r.mu));
    }
    c.notes.push(format!("{count} solves, largest relative residual {worst:.1e}"));
    c
}

// ---------------------------------------------------------------------------
// 9. Determinism across worker counts

fn criterion9(dir: &Path) -> Criterion {
    let mut c = Criterion::new(9, "determinism across worker counts");
    let files = |out: &Path, names: &[&str]| -> Vec<Vec<u8>> { names.iter().map(|n| std::fs::read(out.join(n)).unwrap()).collect() };
    let mut conv = RunConfig::defaults(Experiment::Example1);
    conv.k = 2;
    conv.mesh.levels = 3;
    conv.kappa = Some(KappaSelector::Kappa2);
    let runs = [(1usize, "a"), (4, "b"), (4, "c")];
    let mut outputs = Vec::new();
    for (threads, tag) in runs {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let out1 = dir.join(format!("det-conv-{tag}"));
        let out2 = dir.join(format!("det-ex2-{tag}"));
        let e2 = example2_config(1e-2, 20, 5, &out2);
        pool.install(|| {
            cmd_convergence(&conv, &out1).unwrap();
            cmd_example2(&e2, &out2).unwrap();
        });
        let mut v = files(&out1, &[CSV_FILE, VTK_FILE]);
        v.extend(files(&out2, &[VTK_FILE, KAPPA_FILE]));
        outputs.push(v);
    }
    let names = ["convergence CSV", "convergence VTK", "example2 VTK", "example2 kappa"];
    for (i, name) in names.iter().enumerate() {
        let same = outputs.iter().all(|o| o[i] == outputs[0][i]);
        c.check(same, format!("{name} differs between runs"));
    }
    c.notes.push("CSV, VTK and kappa files byte-identical with 1 and 4 worker threads and on repeat".into());
    c
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut results = vec![criterion1(), criterion6()];

    let mut k1 = Vec::new();
    for k in 1..=3 {
        for mu in MUS {
            k1.push(sweep(KappaChoice::Kappa1, k, mu));
        }
    }
    let k2: Vec<Sweep> = MUS.iter().map(|&mu| sweep(KappaChoice::Kappa2, 2, mu)).collect();
    let e2: Vec<Example2Run> = [1.0, 1e-2].iter().map(|&mu| run_example2(mu, dir.path())).collect();

    let all: Vec<&Sweep> = k1.iter().chain(&k2).collect();
    results.push(criterion2(&all, &e2));
    results.push(criterion3(&k1));
    results.push(criterion4(&k1));
    results.push(criterion5(&k1, &k2));
    results.push(criterion7(&k1));
    results.push(criterion8(&e2));
    results.push(criterion9(dir.path()));
    results.sort_by_key(|c| c.id);

    println!("\nacceptance criteria ({:.0}s):", start.elapsed().as_secs_f64());
    let passed = results.iter().map(|c| c.report()).filter(|&p| p).count();
    println!("{passed} of {} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
