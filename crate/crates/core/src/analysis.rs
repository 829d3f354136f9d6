//! Manufactured solutions, error norms, conservation checks and
//! convergence studies.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::element::{map_grad, Element};
use crate::error::Result;
use crate::fespace::{bdm_interpolate, project_cell, project_facet, DiscreteField, FacetSpace, SpaceLayout};
use crate::forms::{Permeability, ProblemData};
use crate::mesh::{build_structured_mesh, refine_uniform, DomainSpec, FacetClass, Mesh, Point, Subdomain};
use crate::solver::{picard_solve, SolverParams};

pub type Grad = [[f64; 2]; 2];
pub type Hess = [[[f64; 2]; 2]; 2];

// ---------------------------------------------------------------------------
// Velocity and pressure pairs (cell function + facet function)

/// Cell velocity with its gradient (`grad[i][j] = d u_i / d x_j`) and a
/// facet velocity, both given pointwise.
pub trait VelocityPair: Sync {
    fn cell(&self, c: usize, x: Point) -> ([f64; 2], Grad);
    /// Facet velocity on facets of the free-flow skeleton.
    fn facet(&self, f: usize, t: f64, x: Point) -> [f64; 2];
}

/// Cell pressure and the two facet pressures.
pub trait PressurePair: Sync {
    fn cell(&self, c: usize, x: Point) -> f64;
    fn facet_s(&self, f: usize, t: f64, x: Point) -> f64;
    fn facet_d(&self, f: usize, t: f64, x: Point) -> f64;
}

/// Discrete coefficients over a layout.
pub struct Discrete<'a> {
    pub mesh: &'a Mesh,
    pub el: &'a Element,
    pub layout: &'a SpaceLayout,
    pub values: &'a [f64],
}

impl<'a> Discrete<'a> {
    pub fn new(mesh: &'a Mesh, el: &'a Element, layout: &'a SpaceLayout, values: &'a [f64]) -> Self {
        assert_eq!(values.len(), layout.total());
        Self { mesh, el, layout, values }
    }

    pub fn of(mesh: &'a Mesh, el: &'a Element, field: &'a DiscreteField) -> Self {
        Self::new(mesh, el, &field.layout, &field.values)
    }

    fn facet_poly(&self, r: Option<std::ops::Range<usize>>, t: f64, ncomp: usize) -> [f64; 2] {
        let mut out = [0.0; 2];
        if let Some(r) = r {
            let mu = self.el.trace.values(t);
            let b = &self.values[r];
            let m = mu.len();
            for a in 0..ncomp {
                out[a] = (0..m).map(|i| b[a * m + i] * mu[i]).sum();
            }
        }
        out
    }

    /// Second derivatives of the cell velocity (central differences of the
    /// polynomial gradient, exact up to rounding for `k <= 3`).
    pub fn cell_hessian(&self, c: usize, x: Point) -> Hess {
        let d = 1e-3 * self.mesh.cells[c].diameter;
        let mut h = [[[0.0; 2]; 2]; 2];
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += d;
            xm[j] -= d;
            let (_, gp) = VelocityPair::cell(self, c, xp);
            let (_, gm) = VelocityPair::cell(self, c, xm);
            for i in 0..2 {
                for l in 0..2 {
                    h[i][l][j] = (gp[i][l] - gm[i][l]) / (2.0 * d);
                }
            }
        }
        h
    }
}

impl VelocityPair for Discrete<'_> {
    fn cell(&self, c: usize, x: Point) -> ([f64; 2], Grad) {
        let ev = self.el.velocity.eval(self.mesh.to_reference(c, x));
        let b = &self.values[self.layout.cell_velocity(c)];
        let nk = ev.values.len();
        let g = &self.mesh.cells[c].inverse_jacobian;
        let mut v = [0.0; 2];
        let mut grad = [[0.0; 2]; 2];
        for i in 0..nk {
            let gi = map_grad(g, ev.gradients[i]);
            for a in 0..2 {
                let coef = b[a * nk + i];
                v[a] += coef * ev.values[i];
                grad[a][0] += coef * gi[0];
                grad[a][1] += coef * gi[1];
            }
        }
        (v, grad)
    }

    fn facet(&self, f: usize, t: f64, _x: Point) -> [f64; 2] {
        self.facet_poly(self.layout.facet_velocity(f), t, 2)
    }
}

impl PressurePair for Discrete<'_> {
    fn cell(&self, c: usize, x: Point) -> f64 {
        let psi = self.el.pressure.values(self.mesh.to_reference(c, x));
        let b = &self.values[self.layout.cell_pressure(c)];
        psi.iter().zip(b).map(|(a, b)| a * b).sum()
    }

    fn facet_s(&self, f: usize, t: f64, _x: Point) -> f64 {
        self.facet_poly(self.layout.facet_pressure_s(f), t, 1)[0]
    }

    fn facet_d(&self, f: usize, t: f64, _x: Point) -> f64 {
        self.facet_poly(self.layout.facet_pressure_d(f), t, 1)[0]
    }
}

/// Pointwise difference `a - b`.
pub struct Diff<'a, A: ?Sized, B: ?Sized>(pub &'a A, pub &'a B);

impl<A: VelocityPair + ?Sized, B: VelocityPair + ?Sized> VelocityPair for Diff<'_, A, B> {
    fn cell(&self, c: usize, x: Point) -> ([f64; 2], Grad) {
        let (va, ga) = self.0.cell(c, x);
        let (vb, gb) = self.1.cell(c, x);
        (
            [va[0] - vb[0], va[1] - vb[1]],
            [[ga[0][0] - gb[0][0], ga[0][1] - gb[0][1]], [ga[1][0] - gb[1][0], ga[1][1] - gb[1][1]]],
        )
    }

    fn facet(&self, f: usize, t: f64, x: Point) -> [f64; 2] {
        let a = self.0.facet(f, t, x);
        let b = self.1.facet(f, t, x);
        [a[0] - b[0], a[1] - b[1]]
    }
}

impl<A: PressurePair + ?Sized, B: PressurePair + ?Sized> PressurePair for Diff<'_, A, B> {
    fn cell(&self, c: usize, x: Point) -> f64 {
        self.0.cell(c, x) - self.1.cell(c, x)
    }
    fn facet_s(&self, f: usize, t: f64, x: Point) -> f64 {
        self.0.facet_s(f, t, x) - self.1.facet_s(f, t, x)
    }
    fn facet_d(&self, f: usize, t: f64, x: Point) -> f64 {
        self.0.facet_d(f, t, x) - self.1.facet_d(f, t, x)
    }
}

/// Exact solution viewed as a velocity/pressure pair (facet values are
/// the traces of the free-flow velocity and of each subdomain pressure).
/// The pressure is shifted by `-pressure_shift`.
pub struct Exact<'a> {
    pub case: &'a ManufacturedCase,
    pub mesh: &'a Mesh,
    pub pressure_shift: f64,
}

impl VelocityPair for Exact<'_> {
    fn cell(&self, c: usize, x: Point) -> ([f64; 2], Grad) {
        match self.mesh.cells[c].subdomain {
            Subdomain::Stokes => ((self.case.u_s)(x), (self.case.grad_u_s)(x)),
            Subdomain::Darcy => (self.case.u_d(x), self.case.grad_u_d(x)),
        }
    }
    fn facet(&self, _f: usize, _t: f64, x: Point) -> [f64; 2] {
        (self.case.u_s)(x)
    }
}

impl PressurePair for Exact<'_> {
    fn cell(&self, c: usize, x: Point) -> f64 {
        match self.mesh.cells[c].subdomain {
            Subdomain::Stokes => (self.case.p_s)(x) - self.pressure_shift,
            Subdomain::Darcy => (self.case.p_d)(x) - self.pressure_shift,
        }
    }
    fn facet_s(&self, _f: usize, _t: f64, x: Point) -> f64 {
        (self.case.p_s)(x) - self.pressure_shift
    }
    fn facet_d(&self, _f: usize, _t: f64, x: Point) -> f64 {
        (self.case.p_d)(x) - self.pressure_shift
    }
}

// ---------------------------------------------------------------------------
// Norms

/// Parts of the discrete velocity norm; `total()` combines them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NormParts {
    pub v_s: f64,
    pub v_d: f64,
    /// `|| vbar^t ||` on the interface.
    pub tangential: f64,
}

impl NormParts {
    pub fn total(&self) -> f64 {
        (self.v_s.powi(2) + self.v_d.powi(2) + self.tangential.powi(2)).sqrt()
    }
}

fn sq(v: [f64; 2]) -> f64 {
    v[0] * v[0] + v[1] * v[1]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Squared parts `(s, d, tangential)` of the velocity norm.
fn velocity_norm_sq(mesh: &Mesh, el: &Element, v: &(impl VelocityPair + ?Sized)) -> [f64; 3] {
    let cell_part: Vec<[f64; 3]> = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| {
            let cell = &mesh.cells[c];
            let mut out = [0.0; 3];
            for (p, w) in el.cell_rule.iter() {
                let x = mesh.to_physical(c, p);
                let w = w * cell.det;
                let (val, g) = v.cell(c, x);
                match cell.subdomain {
                    Subdomain::Stokes => out[0] += w * (sq(g[0]) + sq(g[1])),
                    Subdomain::Darcy => out[1] += w * (sq(val) + (g[0][0] + g[1][1]).powi(2)),
                }
            }
            for local in 0..3 {
                let f = cell.facets[local];
                let facet = &mesh.facets[f];
                let n = mesh.outward_normal(c, local);
                let len = facet.length;
                match cell.subdomain {
                    Subdomain::Stokes => {
                        for (t, w) in el.facet_rule.iter() {
                            let x = mesh.facet_point(f, t);
                            let (val, _) = v.cell(c, x);
                            let bar = v.facet(f, t, x);
                            out[0] += w * len / cell.diameter * sq([val[0] - bar[0], val[1] - bar[1]]);
                        }
                    }
                    Subdomain::Darcy if facet.class == FacetClass::Interface => {
                        for (t, w) in el.facet_rule.iter() {
                            let x = mesh.facet_point(f, t);
                            let (val, _) = v.cell(c, x);
                            let bar = v.facet(f, t, x);
                            let jump = dot([val[0] - bar[0], val[1] - bar[1]], n);
                            out[1] += w * len / cell.diameter * jump * jump;
                        }
                    }
                    Subdomain::Darcy => {}
                }
            }
            out
        })
        .collect();
    let facet_part: Vec<[f64; 3]> = (0..mesh.num_facets())
        .into_par_iter()
        .map(|f| {
            let facet = &mesh.facets[f];
            let mut out = [0.0; 3];
            let len = facet.length;
            match facet.class {
                FacetClass::InteriorD | FacetClass::ExteriorD => {
                    for (t, w) in el.facet_rule.iter() {
                        let x = mesh.facet_point(f, t);
                        let mut jump = 0.0;
                        for (side, &c) in facet.adjacent().iter().enumerate() {
                            let sign = if side == 0 { 1.0 } else { -1.0 };
                            jump += sign * dot(v.cell(c, x).0, facet.normal);
                        }
                        out[1] += w * len / len * jump * jump;
                    }
                }
                FacetClass::Interface => {
                    for (t, w) in el.facet_rule.iter() {
                        let x = mesh.facet_point(f, t);
                        let bar = v.facet(f, t, x);
                        out[2] += w * len * dot(bar, facet.tangent).powi(2);
                    }
                }
                _ => {}
            }
            out
        })
        .collect();
    let mut total = [0.0; 3];
    for p in cell_part.iter().chain(&facet_part) {
        for i in 0..3 {
            total[i] += p[i];
        }
    }
    total
}

/// `|||v|||_v` split into its free-flow, porous and interface parts.
pub fn velocity_norms(mesh: &Mesh, el: &Element, v: &(impl VelocityPair + ?Sized)) -> NormParts {
    let [s, d, t] = velocity_norm_sq(mesh, el, v);
    NormParts { v_s: s.sqrt(), v_d: d.sqrt(), tangential: t.sqrt() }
}

/// `|||v|||_v` of a coefficient vector.
pub fn velocity_triple_norm(mesh: &Mesh, el: &Element, layout: &SpaceLayout, values: &[f64]) -> NormParts {
    velocity_norms(mesh, el, &Discrete::new(mesh, el, layout, values))
}

/// `sum_{K in T^s} h_K^2 |v|_{2,K}^2` for a pointwise Hessian.
pub fn hessian_term_sq(mesh: &Mesh, el: &Element, hess: impl Fn(usize, Point) -> Hess + Sync) -> f64 {
    (0..mesh.num_cells())
        .into_par_iter()
        .filter(|&c| mesh.cells[c].subdomain == Subdomain::Stokes)
        .map(|c| {
            let cell = &mesh.cells[c];
            let mut s = 0.0;
            for (p, w) in el.cell_rule.iter() {
                let h = hess(c, mesh.to_physical(c, p));
                let mut v = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        for l in 0..2 {
                            v += h[i][j][l] * h[i][j][l];
                        }
                    }
                }
                s += w * cell.det * v;
            }
            cell.diameter * cell.diameter * s
        })
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

/// `(|||q|||_{p,s}, |||q|||_{p,d})`.
pub fn pressure_norms(mesh: &Mesh, el: &Element, q: &(impl PressurePair + ?Sized)) -> [f64; 2] {
    let parts: Vec<[f64; 2]> = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| {
            let cell = &mesh.cells[c];
            let j = if cell.subdomain == Subdomain::Stokes { 0 } else { 1 };
            let mut out = [0.0; 2];
            for (p, w) in el.cell_rule.iter() {
                out[j] += w * cell.det * q.cell(c, mesh.to_physical(c, p)).powi(2);
            }
            for &f in &cell.facets {
                let len = mesh.facets[f].length;
                for (t, w) in el.facet_rule.iter() {
                    let x = mesh.facet_point(f, t);
                    let v = if j == 0 { q.facet_s(f, t, x) } else { q.facet_d(f, t, x) };
                    out[j] += cell.diameter * w * len * v * v;
                }
            }
            out
        })
        .collect();
    let s: f64 = parts.iter().map(|p| p[0]).sum();
    let d: f64 = parts.iter().map(|p| p[1]).sum();
    [s.sqrt(), d.sqrt()]
}

/// L2 norms of the cell velocity and cell pressure, and the energy norm
/// `(sum_{K in T^s} |v|_{1,K}^2 + ||v||_{Omega^d}^2)^{1/2}`.
fn cell_norms(
    mesh: &Mesh,
    el: &Element,
    v: &(impl VelocityPair + ?Sized),
    q: &(impl PressurePair + ?Sized),
) -> (f64, f64, f64) {
    let parts: Vec<[f64; 3]> = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| {
            let cell = &mesh.cells[c];
            let mut out = [0.0; 3];
            for (p, w) in el.cell_rule.iter() {
                let x = mesh.to_physical(c, p);
                let w = w * cell.det;
                let (val, g) = v.cell(c, x);
                out[0] += w * match cell.subdomain {
                    Subdomain::Stokes => sq(g[0]) + sq(g[1]),
                    Subdomain::Darcy => sq(val),
                };
                out[1] += w * sq(val);
                out[2] += w * q.cell(c, x).powi(2);
            }
            out
        })
        .collect();
    let mut t = [0.0; 3];
    for p in &parts {
        for i in 0..3 {
            t[i] += p[i];
        }
    }
    (t[0].sqrt(), t[1].sqrt(), t[2].sqrt())
}

/// L2 norm of the cell velocity over the whole domain.
pub fn velocity_l2(mesh: &Mesh, el: &Element, field: &DiscreteField) -> f64 {
    let d = Discrete::of(mesh, el, field);
    cell_norms(mesh, el, &d, &d).1
}

// ---------------------------------------------------------------------------
// Manufactured solutions

type Vf = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;
type Sf = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
type Gf = Arc<dyn Fn(Point) -> Grad + Send + Sync>;
type Hf = Arc<dyn Fn(Point) -> Hess + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KappaChoice {
    /// `alpha^2 (pi x + 1)^2 / 4`
    Kappa1,
    /// `kappa_1 exp(-15 sin^2(10 y))`
    Kappa2,
}

/// Smooth exact solution with hand-derived derivatives. The porous
/// velocity is `-kappa / mu grad p_d` with a scalar permeability.
#[derive(Clone)]
pub struct ManufacturedCase {
    pub name: String,
    pub domain: DomainSpec,
    pub mu: f64,
    pub alpha: f64,
    pub convection: bool,
    pub u_s: Vf,
    pub grad_u_s: Gf,
    /// `hess[i][j][l] = d^2 u_i / dx_j dx_l`
    pub hess_u_s: Hf,
    pub p_s: Sf,
    pub grad_p_s: Vf,
    pub p_d: Sf,
    pub grad_p_d: Vf,
    pub hess_p_d: Gf,
    pub kappa: Sf,
    pub grad_kappa: Vf,
}

impl std::fmt::Debug for ManufacturedCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManufacturedCase")
            .field("name", &self.name)
            .field("mu", &self.mu)
            .field("alpha", &self.alpha)
            .field("convection", &self.convection)
            .finish_non_exhaustive()
    }
}

impl ManufacturedCase {
    pub fn u_d(&self, x: Point) -> [f64; 2] {
        let k = (self.kappa)(x) / self.mu;
        let g = (self.grad_p_d)(x);
        [-k * g[0], -k * g[1]]
    }

    pub fn grad_u_d(&self, x: Point) -> Grad {
        let k = (self.kappa)(x);
        let gk = (self.grad_kappa)(x);
        let gp = (self.grad_p_d)(x);
        let h = (self.hess_p_d)(x);
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = -(gk[j] * gp[i] + k * h[i][j]) / self.mu;
            }
        }
        out
    }

    pub fn u(&self, x: Point) -> [f64; 2] {
        match self.domain.subdomain_of(x) {
            Subdomain::Stokes => (self.u_s)(x),
            Subdomain::Darcy => self.u_d(x),
        }
    }

    pub fn p(&self, x: Point) -> f64 {
        match self.domain.subdomain_of(x) {
            Subdomain::Stokes => (self.p_s)(x),
            Subdomain::Darcy => (self.p_d)(x),
        }
    }

    /// `(u . grad) u + grad p - mu Laplace u` (the convective part only
    /// when convection is on).
    pub fn f_s(&self, x: Point) -> [f64; 2] {
        let h = (self.hess_u_s)(x);
        let gp = (self.grad_p_s)(x);
        let mut f = [0.0; 2];
        for i in 0..2 {
            f[i] = gp[i] - self.mu * (h[i][0][0] + h[i][1][1]);
        }
        if self.convection {
            let u = (self.u_s)(x);
            let g = (self.grad_u_s)(x);
            for i in 0..2 {
                f[i] += g[i][0] * u[0] + g[i][1] * u[1];
            }
        }
        f
    }

    /// `-div u_d = (grad kappa . grad p_d + kappa Laplace p_d) / mu`.
    pub fn f_d(&self, x: Point) -> f64 {
        let gk = (self.grad_kappa)(x);
        let gp = (self.grad_p_d)(x);
        let h = (self.hess_p_d)(x);
        (dot(gk, gp) + (self.kappa)(x) * (h[0][0] + h[1][1])) / self.mu
    }

    /// Cauchy stress `p I - 2 mu eps(u)` of the free flow.
    pub fn stress_s(&self, x: Point) -> Grad {
        let g = (self.grad_u_s)(x);
        let p = (self.p_s)(x);
        let mut s = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let eps = 0.5 * (g[i][j] + g[j][i]);
                s[i][j] = if i == j { p } else { 0.0 } - 2.0 * self.mu * eps;
            }
        }
        s
    }

    /// Residual of the homogeneous interface conditions on a horizontal
    /// interface (normal `(0, -1)` pointing into the porous region):
    /// `(alpha mu / sqrt(kappa)) (u.t) t + p_d n - sigma n`.
    pub fn interface_traction(&self, x: Point) -> [f64; 2] {
        let n = [0.0, -1.0];
        let t = [1.0, 0.0];
        let u = (self.u_s)(x);
        let s = self.stress_s(x);
        let bjs = self.alpha * self.mu / (self.kappa)(x).sqrt() * dot(u, t);
        let pd = (self.p_d)(x);
        let mut g = [0.0; 2];
        for i in 0..2 {
            g[i] = bjs * t[i] + pd * n[i] - (s[i][0] * n[0] + s[i][1] * n[1]);
        }
        g
    }

    /// Problem data: velocity on the free-flow boundary, normal flux on the
    /// porous boundary, zero-mean pressure.
    pub fn problem_data(&self, beta: f64) -> ProblemData {
        let c = Arc::new(self.clone());
        let (c1, c2, c3, c4) = (c.clone(), c.clone(), c.clone(), c.clone());
        let kappa = self.kappa.clone();
        ProblemData {
            mu: self.mu,
            alpha: self.alpha,
            beta,
            kappa: Permeability::Scalar(kappa),
            f_s: Arc::new(move |x| c1.f_s(x)),
            f_d: Arc::new(move |x| c2.f_d(x)),
            g_u: self.u_s.clone(),
            g_n: Arc::new(move |x, n| dot(c3.u_d(x), n)),
            g_p: Arc::new(|_| 0.0),
            pressure_sides: Vec::new(),
            interface_traction: Some(Arc::new(move |x| c4.interface_traction(x))),
            convection: self.convection,
        }
    }

    /// Domain mean of the exact pressure.
    pub fn pressure_mean(&self, mesh: &Mesh, el: &Element) -> f64 {
        let mut total = 0.0;
        for (c, cell) in mesh.cells.iter().enumerate() {
            for (p, w) in el.cell_rule.iter() {
                total += w * cell.det * self.p(mesh.to_physical(c, p));
            }
        }
        total / mesh.spec.area()
    }
}

/// Example 1: `[0,1] x [-1,1]`, free flow above `y = 0`, Navier-Stokes.
pub fn make_example1(mu: f64, kappa: KappaChoice, alpha: f64) -> ManufacturedCase {
    let domain = DomainSpec::new([0.0, 1.0], [-1.0, 1.0], 0.0).expect("valid domain");
    let u_s: Vf = Arc::new(|x: Point| {
        let (cc, _) = cs(x);
        [PI * x[0] * cc + 1.0, -PI * x[1] * cc + 2.0 * x[0]]
    });
    let grad_u_s: Gf = Arc::new(|x: Point| {
        let (c, s) = cs(x);
        let (x1, x2) = (x[0], x[1]);
        let pi2 = PI * PI;
        [
            [PI * c - pi2 * x1 * x2 * s, -pi2 * x1 * x1 * s],
            [pi2 * x2 * x2 * s + 2.0, -PI * c + pi2 * x1 * x2 * s],
        ]
    });
    let hess_u_s: Hf = Arc::new(|x: Point| {
        let (c, s) = cs(x);
        let (x1, x2) = (x[0], x[1]);
        let (p2, p3) = (PI * PI, PI * PI * PI);
        let u1xx = -2.0 * p2 * x2 * s - p3 * x1 * x2 * x2 * c;
        let u1xy = -2.0 * p2 * x1 * s - p3 * x1 * x1 * x2 * c;
        let u1yy = -p3 * x1 * x1 * x1 * c;
        let u2xx = p3 * x2 * x2 * x2 * c;
        let u2xy = 2.0 * p2 * x2 * s + p3 * x1 * x2 * x2 * c;
        let u2yy = 2.0 * p2 * x1 * s + p3 * x1 * x1 * x2 * c;
        [[[u1xx, u1xy], [u1xy, u1yy]], [[u2xx, u2xy], [u2xy, u2yy]]]
    });
    let p_s: Sf = Arc::new(move |x: Point| mu * (1.0 - PI) * cs(x).0 + (0.5 * PI * x[1]).sin() / mu);
    let grad_p_s: Vf = Arc::new(move |x: Point| {
        let s = cs(x).1;
        let a = -mu * (1.0 - PI) * PI * s;
        [a * x[1], a * x[0] + 0.5 * PI * (0.5 * PI * x[1]).cos() / mu]
    });
    let a8 = 8.0 * mu / (alpha * alpha);
    let p_d: Sf = Arc::new(move |x: Point| -a8 * x[0] * x[1] / (PI * x[0] + 1.0).powi(2) + mu * cs(x).0);
    let grad_p_d: Vf = Arc::new(move |x: Point| {
        let (x1, x2) = (x[0], x[1]);
        let q = PI * x1 + 1.0;
        let s = cs(x).1;
        [
            -a8 * x2 * (1.0 - PI * x1) / q.powi(3) - mu * PI * x2 * s,
            -a8 * x1 / q.powi(2) - mu * PI * x1 * s,
        ]
    });
    let hess_p_d: Gf = Arc::new(move |x: Point| {
        let (x1, x2) = (x[0], x[1]);
        let q = PI * x1 + 1.0;
        let (c, s) = cs(x);
        let pxx = a8 * PI * x2 * (4.0 - 2.0 * PI * x1) / q.powi(4) - mu * PI * PI * x2 * x2 * c;
        let pxy = -a8 * (1.0 - PI * x1) / q.powi(3) - mu * PI * s - mu * PI * PI * x1 * x2 * c;
        let pyy = -mu * PI * PI * x1 * x1 * c;
        [[pxx, pxy], [pxy, pyy]]
    });
    let a2 = alpha * alpha;
    let k1 = move |x: Point| a2 * (PI * x[0] + 1.0).powi(2) / 4.0;
    let dk1 = move |x: Point| a2 * PI * (PI * x[0] + 1.0) / 2.0;
    let (kappa_f, grad_kappa): (Sf, Vf) = match kappa {
        KappaChoice::Kappa1 => (Arc::new(k1), Arc::new(move |x: Point| [dk1(x), 0.0])),
        KappaChoice::Kappa2 => {
            let e = |y: f64| (-15.0 * (10.0 * y).sin().powi(2)).exp();
            (
                Arc::new(move |x: Point| k1(x) * e(x[1])),
                Arc::new(move |x: Point| [dk1(x) * e(x[1]), -150.0 * k1(x) * e(x[1]) * (20.0 * x[1]).sin()]),
            )
        }
    };
    let label = match kappa {
        KappaChoice::Kappa1 => "kappa1",
        KappaChoice::Kappa2 => "kappa2",
    };
    ManufacturedCase {
        name: format!("example1-{label}"),
        domain,
        mu,
        alpha,
        convection: true,
        u_s,
        grad_u_s,
        hess_u_s,
        p_s,
        grad_p_s,
        p_d,
        grad_p_d,
        hess_p_d,
        kappa: kappa_f,
        grad_kappa,
    }
}

fn cs(x: Point) -> (f64, f64) {
    let a = PI * x[0] * x[1];
    (a.cos(), a.sin())
}

/// Polynomial Stokes-Darcy solution on the Example 1 domain with
/// `u_s in P_2` (divergence free), `p_s, p_d in P_1`, `kappa = 1`.
/// Reproduced exactly by the scheme for `k >= 2`.
pub fn make_polynomial_case(mu: f64, alpha: f64) -> ManufacturedCase {
    let domain = DomainSpec::new([0.0, 1.0], [-1.0, 1.0], 0.0).expect("valid domain");
    // stream function -y / mu + x y^2 + y^3 / 3 gives u_d . n continuity at y = 0
    ManufacturedCase {
        name: "polynomial".into(),
        domain,
        mu,
        alpha,
        convection: false,
        u_s: Arc::new(move |x: Point| [-1.0 / mu + 2.0 * x[0] * x[1] + x[1] * x[1], -x[1] * x[1]]),
        grad_u_s: Arc::new(|x: Point| [[2.0 * x[1], 2.0 * x[0] + 2.0 * x[1]], [0.0, -2.0 * x[1]]]),
        hess_u_s: Arc::new(|_| [[[0.0, 2.0], [2.0, 2.0]], [[0.0, 0.0], [0.0, -2.0]]]),
        p_s: Arc::new(|x: Point| x[0] + x[1]),
        grad_p_s: Arc::new(|_| [1.0, 1.0]),
        p_d: Arc::new(|x: Point| x[0]),
        grad_p_d: Arc::new(|_| [1.0, 0.0]),
        hess_p_d: Arc::new(|_| [[0.0; 2]; 2]),
        kappa: Arc::new(|_| 1.0),
        grad_kappa: Arc::new(|_| [0.0, 0.0]),
    }
}

// ---------------------------------------------------------------------------
// Errors

/// Interpolant `(Pi_V u, Pi u|_F)` of the exact velocity and
/// `(Pi_Q p, Pi p_s|_F, Pi p_d|_F)` of the shifted exact pressure.
pub fn interpolate(
    case: &ManufacturedCase,
    mesh: &Mesh,
    el: &Element,
    layout: &std::sync::Arc<SpaceLayout>,
    pressure_shift: f64,
) -> Result<DiscreteField> {
    let k = el.k;
    let qd = el.cell_rule.degree;
    let u = bdm_interpolate(mesh, k, qd, |c, x| match mesh.cells[c].subdomain {
        Subdomain::Stokes => (case.u_s)(x),
        Subdomain::Darcy => case.u_d(x),
    })?;
    let p = project_cell(mesh, k - 1, qd, |c, x| {
        pressure_shift.mul_add(-1.0, match mesh.cells[c].subdomain {
            Subdomain::Stokes => (case.p_s)(x),
            Subdomain::Darcy => (case.p_d)(x),
        })
    });
    let ub = project_facet(mesh, FacetSpace::Velocity, k, qd, |_, x| (case.u_s)(x).to_vec());
    let ps = project_facet(mesh, FacetSpace::PressureS, k, qd, |_, x| vec![(case.p_s)(x) - pressure_shift]);
    let pd = project_facet(mesh, FacetSpace::PressureD, k, qd, |_, x| vec![(case.p_d)(x) - pressure_shift]);
    let mut field = DiscreteField::zeros(layout.clone());
    field.set_cell_velocity(&u);
    field.set_cell_pressure(&p);
    for f in 0..mesh.num_facets() {
        if let Some(r) = layout.facet_velocity(f) {
            field.values[r].copy_from_slice(ub.block(f));
        }
        if let Some(r) = layout.facet_pressure_s(f) {
            field.values[r].copy_from_slice(ps.block(f));
        }
        if let Some(r) = layout.facet_pressure_d(f) {
            field.values[r].copy_from_slice(pd.block(f));
        }
    }
    Ok(field)
}

/// `|||(u - Pi_V u, u - Pi u)|||_{v'}` including the Hessian term.
pub fn interpolation_error_vprime(case: &ManufacturedCase, mesh: &Mesh, el: &Element) -> Result<f64> {
    let layout = Arc::new(SpaceLayout::new(mesh, el.k, true));
    let interp = interpolate(case, mesh, el, &layout, 0.0)?;
    let exact = Exact { case, mesh, pressure_shift: 0.0 };
    let disc = Discrete::of(mesh, el, &interp);
    let parts = velocity_norms(mesh, el, &Diff(&exact, &disc));
    let h2 = hessian_term_sq(mesh, el, |c, x| {
        let a = (case.hess_u_s)(x);
        let b = disc.cell_hessian(c, x);
        let mut d = [[[0.0; 2]; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for l in 0..2 {
                    d[i][j][l] = a[i][j][l] - b[i][j][l];
                }
            }
        }
        d
    });
    Ok((parts.total().powi(2) + h2).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    /// Energy norm of `u - u_h`.
    pub err_e_u: f64,
    pub err_l2_u: f64,
    /// L2 norm of `p - p_h` (exact pressure shifted to zero mean when the
    /// mean-pressure constraint is active).
    pub err_l2_p: f64,
    /// `|||Pi u - u_h|||_v` by parts.
    pub triple_v: NormParts,
    /// `|||Pi p - p_h|||_{p,s}`, `|||Pi p - p_h|||_{p,d}`.
    pub triple_p: [f64; 2],
}

pub fn error_norms(case: &ManufacturedCase, mesh: &Mesh, el: &Element, field: &DiscreteField) -> Result<ErrorReport> {
    let shift = if field.layout.multiplier().is_some() { case.pressure_mean(mesh, el) } else { 0.0 };
    let exact = Exact { case, mesh, pressure_shift: shift };
    let disc = Discrete::of(mesh, el, field);
    let (e, l2u, l2p) = cell_norms(mesh, el, &Diff(&exact, &disc), &Diff(&exact, &disc));
    let interp = interpolate(case, mesh, el, &field.layout, shift)?;
    let di = Discrete::of(mesh, el, &interp);
    let triple_v = velocity_norms(mesh, el, &Diff(&di, &disc));
    let triple_p = pressure_norms(mesh, el, &Diff(&di, &disc));
    Ok(ErrorReport { err_e_u: e, err_l2_u: l2u, err_l2_p: l2p, triple_v, triple_p })
}

// ---------------------------------------------------------------------------
// Conservation

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConservationReport {
    /// `max |div u_h + chi_d Pi_Q (f_d - shift)|` over cell quadrature points.
    pub divergence: f64,
    /// `max |[u_h . n]|` over interior facet quadrature points.
    pub normal_jump: f64,
    /// `max |u_h . n - ubar_h . n|` on interface facets (both sides).
    pub interface: f64,
    /// `|sum over the boundary of int u_h . n|`.
    pub boundary_flux: f64,
    /// Domain L2 norm of `u_h`, the scale for the residuals.
    pub velocity_norm: f64,
}

impl ConservationReport {
    pub fn max_relative(&self) -> f64 {
        let s = if self.velocity_norm > 0.0 { self.velocity_norm } else { 1.0 };
        self.divergence.max(self.normal_jump).max(self.interface) / s
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative() <= tol
    }
}

pub fn conservation_report(mesh: &Mesh, el: &Element, field: &DiscreteField, data: &ProblemData) -> ConservationReport {
    let disc = Discrete::of(mesh, el, field);
    let fd = project_cell(mesh, el.k - 1, el.cell_rule.degree, |_, x| (data.f_d)(x) - field.source_shift);
    let div: f64 = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| {
            let mut m = 0.0f64;
            for (p, _) in el.cell_rule.iter() {
                let x = mesh.to_physical(c, p);
                let (_, g) = VelocityPair::cell(&disc, c, x);
                let mut r = g[0][0] + g[1][1];
                if mesh.cells[c].subdomain == Subdomain::Darcy {
                    let psi = el.pressure.values(p);
                    r += psi.iter().zip(fd.block(c)).map(|(a, b)| a * b).sum::<f64>();
                }
                m = m.max(r.abs());
            }
            m
        })
        .reduce(|| 0.0, f64::max);
    let facet_res: Vec<(f64, f64, f64)> = (0..mesh.num_facets())
        .into_par_iter()
        .map(|f| {
            let facet = &mesh.facets[f];
            let n = facet.normal;
            let (mut jump, mut iface, mut flux) = (0.0f64, 0.0f64, 0.0);
            for (t, w) in el.facet_rule.iter() {
                let x = mesh.facet_point(f, t);
                let un: Vec<f64> = facet.adjacent().iter().map(|&c| dot(VelocityPair::cell(&disc, c, x).0, n)).collect();
                match facet.class {
                    FacetClass::InteriorS | FacetClass::InteriorD => jump = jump.max((un[0] - un[1]).abs()),
                    FacetClass::Interface => {
                        let bn = dot(VelocityPair::facet(&disc, f, t, x), n);
                        iface = iface.max((un[0] - bn).abs()).max((un[1] - bn).abs());
                    }
                    FacetClass::ExteriorS | FacetClass::ExteriorD => flux += w * facet.length * un[0],
                }
            }
            (jump, iface, flux)
        })
        .collect();
    let normal_jump = facet_res.iter().map(|r| r.0).fold(0.0, f64::max);
    let interface = facet_res.iter().map(|r| r.1).fold(0.0, f64::max);
    let boundary_flux = facet_res.iter().map(|r| r.2).sum::<f64>().abs();
    ConservationReport {
        divergence: div,
        normal_jump,
        interface,
        boundary_flux,
        velocity_norm: velocity_l2(mesh, el, field),
    }
}

// ---------------------------------------------------------------------------
// Convergence studies

#[derive(Debug, Clone, PartialEq)]
pub struct LevelResult {
    pub level: usize,
    pub h: f64,
    pub dofs: usize,
    pub errors: ErrorReport,
    pub picard_iters: usize,
    pub converged: bool,
    pub residual: f64,
    pub conservation: ConservationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub case: String,
    pub k: usize,
    pub mu: f64,
    pub levels: Vec<LevelResult>,
}

/// `log2(e_prev / e_next)`, defined only when both errors exceed 1e-14.
pub fn rate(prev: f64, next: f64) -> Option<f64> {
    (prev > 1e-14 && next > 1e-14).then(|| (prev / next).log2())
}

impl ConvergenceReport {
    /// Rates `(E u, L2 u, L2 p)` between level `i - 1` and `i`.
    pub fn rates(&self, i: usize) -> [Option<f64>; 3] {
        if i == 0 || i >= self.levels.len() {
            return [None; 3];
        }
        let (a, b) = (&self.levels[i - 1].errors, &self.levels[i].errors);
        [rate(a.err_e_u, b.err_e_u), rate(a.err_l2_u, b.err_l2_u), rate(a.err_l2_p, b.err_l2_p)]
    }

    pub fn finest_rates(&self) -> [Option<f64>; 3] {
        self.rates(self.levels.len().saturating_sub(1))
    }

    pub fn all_converged(&self) -> bool {
        self.levels.iter().all(|l| l.converged)
    }

    pub const CSV_HEADER: &'static str =
        "level,h,dofs,err_E_u,err_L2_u,err_L2_p,rate_E_u,rate_L2_u,rate_L2_p,picard_iters";

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", Self::CSV_HEADER).unwrap();
        let fmt = |r: Option<f64>| r.map(|v| format!("{v:.4}")).unwrap_or_default();
        for (i, l) in self.levels.iter().enumerate() {
            let [re, ru, rp] = self.rates(i);
            writeln!(
                s,
                "{},{:.6e},{},{:.6e},{:.6e},{:.6e},{},{},{},{}",
                l.level,
                l.h,
                l.dofs,
                l.errors.err_e_u,
                l.errors.err_l2_u,
                l.errors.err_l2_p,
                fmt(re),
                fmt(ru),
                fmt(rp),
                l.picard_iters
            )
            .unwrap();
        }
        s
    }
}

/// Solves `case` on `levels` uniformly refined meshes starting from grid
/// spacing `1 / base_n`.
pub fn run_convergence(
    case: &ManufacturedCase,
    k: usize,
    base_n: usize,
    levels: usize,
    beta: f64,
    params: &SolverParams,
) -> Result<ConvergenceReport> {
    run_convergence_with(case, k, base_n, levels, beta, params, |_, _, _| {})
}

/// `run_convergence`, handing each level's mesh and solution to `on_level`.
pub fn run_convergence_with(
    case: &ManufacturedCase,
    k: usize,
    base_n: usize,
    levels: usize,
    beta: f64,
    params: &SolverParams,
    mut on_level: impl FnMut(usize, &Mesh, &DiscreteField),
) -> Result<ConvergenceReport> {
    let el = Element::with_default_rule(k);
    let data = case.problem_data(beta);
    let mut mesh = build_structured_mesh(&case.domain, base_n)?;
    let mut out = Vec::with_capacity(levels);
    for level in 0..levels {
        if level > 0 {
            mesh = refine_uniform(&mesh);
        }
        let layout = Arc::new(SpaceLayout::new(&mesh, k, true));
        let (field, report) = picard_solve(&mesh, &layout, &el, &data, params)?;
        let errors = error_norms(case, &mesh, &el, &field)?;
        let conservation = conservation_report(&mesh, &el, &field, &data);
        on_level(level, &mesh, &field);
        out.push(LevelResult {
            level,
            h: mesh.h(),
            dofs: layout.total(),
            errors,
            picard_iters: report.iterations,
            converged: report.converged,
            residual: report.residual,
            conservation,
        });
    }
    Ok(ConvergenceReport { case: case.name.clone(), k, mu: case.mu, levels: out })
}
