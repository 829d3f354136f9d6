use std::sync::Arc;

use hdg_core::analysis::{
    conservation_report, error_norms, interpolation_error_vprime, make_example1, make_polynomial_case, run_convergence,
    KappaChoice,
};
use hdg_core::element::Element;
use hdg_core::fespace::SpaceLayout;
use hdg_core::forms::ProblemData;
use hdg_core::mesh::{build_structured_mesh, refine_uniform, Mesh};
use hdg_core::solver::{assemble_global, picard_solve, solve_condensed, solve_linear, SolverParams};

fn example1_mesh(n: usize) -> Mesh {
    build_structured_mesh(&make_example1(0.1, KappaChoice::Kappa1, 1.0).domain, n).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn example1_solves_are_conservative() {
    let mesh = example1_mesh(4);
    for k in 1..=3 {
        for mu in [0.1, 1e-3] {
            let case = make_example1(mu, KappaChoice::Kappa1, 1.0);
            let data = case.problem_data(ProblemData::default_beta(k));
            let el = Element::with_default_rule(k);
            let layout = Arc::new(SpaceLayout::new(&mesh, k, true));
            let (u, rep) = picard_solve(&mesh, &layout, &el, &data, &SolverParams::default()).unwrap();
            assert!(rep.converged, "k={k} mu={mu}");
            let c = conservation_report(&mesh, &el, &u, &data);
            assert!(c.passes(1e-9), "k={k} mu={mu}: {c:?}");
        }
    }
}

#[test]
fn condensed_and_full_solves_agree_on_example1() {
    let mesh = example1_mesh(4);
    for k in 1..=2 {
        let case = make_example1(0.1, KappaChoice::Kappa1, 1.0);
        let data = case.problem_data(ProblemData::default_beta(k));
        let el = Element::with_default_rule(k);
        let layout = Arc::new(SpaceLayout::new(&mesh, k, true));
        let (w, _) = picard_solve(&mesh, &layout, &el, &data, &SolverParams::default()).unwrap();
        for wind in [None, Some(&w)] {
            let sys = assemble_global(&mesh, &layout, &el, &data, wind).unwrap();
            let (full, r1) = solve_linear(&sys).unwrap();
            let (cond, r2) = solve_condensed(&sys).unwrap();
            assert!(r1 <= 1e-12 && r2 <= 1e-12, "{r1:e} {r2:e}");
            let d = max_diff(&full.values, &cond.values);
            assert!(d <= 1e-8, "k={k}: {d:e}");
        }
    }
}

#[test]
fn polynomial_solution_is_reproduced() {
    let mut mesh = example1_mesh(2);
    for convection in [false, true] {
        for k in 2..=3 {
            let mut case = make_polynomial_case(1.0, 1.0);
            case.convection = convection;
            let data = case.problem_data(ProblemData::default_beta(k));
            let el = Element::with_default_rule(k);
            let layout = Arc::new(SpaceLayout::new(&mesh, k, true));
            let (u, rep) = picard_solve(&mesh, &layout, &el, &data, &SolverParams::default()).unwrap();
            assert!(rep.converged);
            let e = error_norms(&case, &mesh, &el, &u).unwrap();
            for v in [e.err_e_u, e.err_l2_u, e.err_l2_p, e.triple_v.total(), e.triple_p[0], e.triple_p[1]] {
                assert!(v <= 1e-9, "k={k} convection={convection}: {e:?}");
            }
        }
        mesh = refine_uniform(&mesh);
    }
}

#[test]
fn picard_iteration_counts() {
    let mesh = example1_mesh(8);
    let k = 2;
    let el = Element::with_default_rule(k);
    let layout = Arc::new(SpaceLayout::new(&mesh, k, true));
    let case = make_example1(0.1, KappaChoice::Kappa1, 1.0);
    let mut data = case.problem_data(ProblemData::default_beta(k));
    let params = SolverParams::default();
    let (_, rep) = picard_solve(&mesh, &layout, &el, &data, &params).unwrap();
    assert!(rep.converged && rep.iterations <= 25, "{rep:?}");

    // smaller data converges no slower
    let scale = |f: &ProblemData, s: f64| {
        let mut d = f.clone();
        let (fs, gu) = (f.f_s.clone(), f.g_u.clone());
        let (fd, gn) = (f.f_d.clone(), f.g_n.clone());
        let tr = f.interface_traction.clone().unwrap();
        d.f_s = Arc::new(move |x| fs(x).map(|v| s * v));
        d.g_u = Arc::new(move |x| gu(x).map(|v| s * v));
        d.f_d = Arc::new(move |x| s * fd(x));
        d.g_n = Arc::new(move |x, n| s * gn(x, n));
        d.interface_traction = Some(Arc::new(move |x| tr(x).map(|v| s * v)));
        d
    };
    let (_, small) = picard_solve(&mesh, &layout, &el, &scale(&data, 0.1), &params).unwrap();
    assert!(small.converged && small.iterations <= rep.iterations, "{} > {}", small.iterations, rep.iterations);

    data.convection = false;
    let (_, lin) = picard_solve(&mesh, &layout, &el, &data, &params).unwrap();
    assert_eq!(lin.iterations, 1);
}

#[test]
fn kappa2_gives_larger_velocity_errors() {
    let params = SolverParams::default();
    let r1 = run_convergence(&make_example1(0.1, KappaChoice::Kappa1, 1.0), 2, 4, 3, 32.0, &params).unwrap();
    let r2 = run_convergence(&make_example1(0.1, KappaChoice::Kappa2, 1.0), 2, 4, 3, 32.0, &params).unwrap();
    for (a, b) in r1.levels.iter().zip(&r2.levels) {
        assert!(b.errors.err_e_u > a.errors.err_e_u, "level {}", a.level);
    }
}

#[test]
fn errors_decrease_under_refinement() {
    let r = run_convergence(&make_example1(0.1, KappaChoice::Kappa1, 1.0), 1, 4, 3, 8.0, &SolverParams::default()).unwrap();
    for w in r.levels.windows(2) {
        let (a, b) = (&w[0].errors, &w[1].errors);
        assert!(b.err_e_u < a.err_e_u && b.err_l2_u < a.err_l2_u && b.err_l2_p < a.err_l2_p);
        assert!(b.triple_v.total() < a.triple_v.total());
    }
    let [e, l2u, p] = r.finest_rates();
    assert!(e.unwrap() >= 0.8 && l2u.unwrap() >= 1.8 && p.unwrap() >= 0.8, "{:?}", r.finest_rates());
    assert_eq!(r.to_csv().lines().count(), 4);
}

#[test]
fn interpolation_error_converges_at_rate_k() {
    let case = make_example1(0.1, KappaChoice::Kappa1, 1.0);
    for k in 1..=3 {
        let el = Element::with_default_rule(k);
        let mut mesh = example1_mesh(4);
        let coarse = interpolation_error_vprime(&case, &mesh, &el).unwrap();
        mesh = refine_uniform(&mesh);
        let fine = interpolation_error_vprime(&case, &mesh, &el).unwrap();
        let rate = (coarse / fine).log2();
        assert!(rate >= k as f64 - 0.2, "k={k}: {rate}");
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let case = make_example1(0.1, KappaChoice::Kappa2, 1.0);
    let run = |t: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
        pool.install(|| run_convergence(&case, 2, 4, 2, 32.0, &SolverParams::default()).unwrap().to_csv())
    };
    assert_eq!(run(1), run(4));
}
