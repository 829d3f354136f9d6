use hdg_core::element::Element;
use hdg_core::fespace::{bdm_interpolate, CellPolyField};
use hdg_core::mesh::{build_structured_mesh, refine_uniform, DomainSpec, Mesh, Point};
use proptest::prelude::*;

const QUAD: usize = 16;

fn mesh() -> Mesh {
    let m = build_structured_mesh(&DomainSpec::new([0.0, 1.0], [-1.0, 1.0], 0.0).unwrap(), 2).unwrap();
    refine_uniform(&m)
}

/// Smooth field `(sin(a x + b y), cos(c x y) + d x)` and its divergence.
fn field(p: [f64; 4]) -> (impl Fn(Point) -> [f64; 2] + Sync, impl Fn(Point) -> f64) {
    let [a, b, c, d] = p;
    let u = move |x: Point| [(a * x[0] + b * x[1]).sin(), (c * x[0] * x[1]).cos() + d * x[0]];
    let div = move |x: Point| a * (a * x[0] + b * x[1]).cos() - c * x[0] * (c * x[0] * x[1]).sin();
    (u, div)
}

/// Largest residuals of the facet normal moments against `P_k(F)` and the
/// cell divergence moments against `P_{k-1}(K)`.
fn moment_residuals(m: &Mesh, k: usize, pi: &CellPolyField, u: &dyn Fn(Point) -> [f64; 2], div: &dyn Fn(Point) -> f64) -> (f64, f64) {
    let el = Element::new(k, QUAD);
    let nk = el.n_vel();
    let (mut facet, mut cell) = (0.0f64, 0.0f64);
    for c in 0..m.num_cells() {
        let b = pi.block(c);
        for local in 0..3 {
            let qps = el.facet_qps(m, c, local);
            for j in 0..el.n_trace() {
                let mut r = 0.0;
                for qp in &qps {
                    let v: [f64; 2] = std::array::from_fn(|a| (0..nk).map(|i| b[a * nk + i] * qp.phi[i]).sum());
                    let e = u(qp.x);
                    r += qp.w * qp.mu[j] * ((e[0] - v[0]) * qp.n[0] + (e[1] - v[1]) * qp.n[1]);
                }
                facet = facet.max(r.abs());
            }
        }
        let qps = el.cell_qps(m, c);
        for q in 0..el.n_pres() {
            let mut r = 0.0;
            for qp in &qps {
                let dv: f64 = (0..nk).map(|i| b[i] * qp.grad[i][0] + b[nk + i] * qp.grad[i][1]).sum();
                r += qp.w * qp.psi[q] * (div(qp.x) - dv);
            }
            cell = cell.max(r.abs());
        }
    }
    (facet, cell)
}

#[test]
fn moments_vanish_for_smooth_fields() {
    let m = mesh();
    for k in 1..=3 {
        let (u, div) = field([1.3, -0.7, 2.1, 0.4]);
        let pi = bdm_interpolate(&m, k, QUAD, |_, x| u(x)).unwrap();
        let (f, c) = moment_residuals(&m, k, &pi, &u, &div);
        assert!(f <= 1e-11 && c <= 1e-11, "k={k}: facet {f:e}, cell {c:e}");
    }
}

#[test]
fn polynomials_up_to_degree_k_are_reproduced() {
    let m = mesh();
    for k in 1..=3 {
        let el = Element::new(k, QUAD);
        let u = move |x: Point| {
            let (s, t) = (x[0] - 0.3, x[1] + 0.2);
            let p = |a: f64, b: f64| (0..=k).map(|d| (a * s - b * t).powi(d as i32)).sum::<f64>();
            [p(1.0, 0.5), p(-0.4, 1.1)]
        };
        let pi = bdm_interpolate(&m, k, QUAD, |_, x| u(x)).unwrap();
        let nk = el.n_vel();
        for c in 0..m.num_cells() {
            let b = pi.block(c);
            for qp in el.cell_qps(&m, c) {
                let e = u(qp.x);
                for a in 0..2 {
                    let v: f64 = (0..nk).map(|i| b[a * nk + i] * qp.phi[i]).sum();
                    assert!((v - e[a]).abs() <= 1e-12, "k={k} cell {c}: {v} vs {}", e[a]);
                }
            }
        }
    }
}

#[test]
fn normal_component_is_continuous() {
    let m = mesh();
    let (u, _) = field([0.5, 1.5, -1.0, 2.0]);
    for k in 1..=3 {
        let el = Element::new(k, QUAD);
        let pi = bdm_interpolate(&m, k, QUAD, |_, x| u(x)).unwrap();
        let nk = el.n_vel();
        for (f, facet) in m.facets.iter().enumerate() {
            let adj = facet.adjacent();
            if adj.len() != 2 {
                continue;
            }
            for t in [0.0, 0.37, 1.0] {
                let x = m.facet_point(f, t);
                let un: Vec<f64> = adj
                    .iter()
                    .map(|&c| {
                        let phi = el.velocity.values(m.to_reference(c, x));
                        let b = pi.block(c);
                        let v: [f64; 2] = std::array::from_fn(|a| (0..nk).map(|i| b[a * nk + i] * phi[i]).sum());
                        v[0] * facet.normal[0] + v[1] * facet.normal[1]
                    })
                    .collect();
                assert!((un[0] - un[1]).abs() <= 1e-11, "k={k} facet {f}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn moments_vanish_for_random_fields(a in -3.0..3.0f64, b in -3.0..3.0f64, c in -3.0..3.0f64, d in -2.0..2.0f64, k in 1usize..=3) {
        let m = build_structured_mesh(&DomainSpec::new([0.0, 1.0], [-1.0, 1.0], 0.0).unwrap(), 2).unwrap();
        let (u, div) = field([a, b, c, d]);
        let pi = bdm_interpolate(&m, k, QUAD, |_, x| u(x)).unwrap();
        let (f, cl) = moment_residuals(&m, k, &pi, &u, &div);
        prop_assert!(f <= 1e-11 && cl <= 1e-11, "facet {:e}, cell {:e}", f, cl);
    }
}
