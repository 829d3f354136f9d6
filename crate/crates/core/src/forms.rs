//! Dense local kernels of the discrete forms: the interior-penalty viscous
//! form on free-flow cells, the upwinded convection form, the Darcy mass
//! form, the Beavers-Joseph-Saffman interface form, the pressure-velocity
//! coupling forms, and load / boundary data contributions.
//!
//! Every kernel carries global dof indices (constrained dofs included);
//! elimination of prescribed values happens during assembly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::fespace::SpaceLayout;
use crate::mesh::{BoundarySide, FacetClass, Mesh, Point, Subdomain};

pub type ScalarFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;
/// Boundary flux data as a function of position and outward unit normal.
pub type FluxFn = Arc<dyn Fn(Point, [f64; 2]) -> f64 + Send + Sync>;
pub type TensorFn = Arc<dyn Fn(Point) -> [[f64; 2]; 2] + Send + Sync>;

/// Permeability of the porous region.
#[derive(Clone)]
pub enum Permeability {
    /// `kappa(x) I`.
    Scalar(ScalarFn),
    /// Full symmetric tensor.
    Tensor(TensorFn),
    /// Constant scalar per cell, indexed by cell id (entries of free-flow
    /// cells are ignored).
    PerCell(Arc<Vec<f64>>),
}

impl Permeability {
    pub fn constant(k: f64) -> Self {
        Permeability::Scalar(Arc::new(move |_| k))
    }

    pub fn at(&self, cell: usize, x: Point) -> [[f64; 2]; 2] {
        match self {
            Permeability::Scalar(f) => {
                let k = f(x);
                [[k, 0.0], [0.0, k]]
            }
            Permeability::Tensor(f) => f(x),
            Permeability::PerCell(v) => [[v[cell], 0.0], [0.0, v[cell]]],
        }
    }
}

impl std::fmt::Debug for Permeability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Permeability::Scalar(_) => write!(f, "Permeability::Scalar"),
            Permeability::Tensor(_) => write!(f, "Permeability::Tensor"),
            Permeability::PerCell(v) => write!(f, "Permeability::PerCell({} cells)", v.len()),
        }
    }
}

/// Physical parameters, sources and boundary data.
#[derive(Clone)]
pub struct ProblemData {
    /// Kinematic viscosity.
    pub mu: f64,
    /// Beavers-Joseph-Saffman constant.
    pub alpha: f64,
    /// Interior penalty parameter.
    pub beta: f64,
    pub kappa: Permeability,
    /// Momentum source in the free-flow region.
    pub f_s: VectorFn,
    /// Mass source in the porous region.
    pub f_d: ScalarFn,
    /// Velocity on the free-flow exterior boundary.
    pub g_u: VectorFn,
    /// Normal flux `u . n` on porous exterior facets without pressure data.
    pub g_n: FluxFn,
    /// Pressure on porous exterior facets lying on `pressure_sides`.
    pub g_p: ScalarFn,
    pub pressure_sides: Vec<BoundarySide>,
    /// Traction defect added on the interface for exact solutions that do
    /// not satisfy the homogeneous transmission conditions:
    /// `g = (alpha mu / sqrt(kappa_t)) (u.t) t + p_d n - sigma n`.
    pub interface_traction: Option<VectorFn>,
    /// Navier-Stokes (`true`) or Stokes (`false`) in the free-flow region.
    pub convection: bool,
}

impl std::fmt::Debug for ProblemData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemData")
            .field("mu", &self.mu)
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("kappa", &self.kappa)
            .field("pressure_sides", &self.pressure_sides)
            .field("convection", &self.convection)
            .finish_non_exhaustive()
    }
}

impl ProblemData {
    /// Homogeneous data: zero sources, no-slip walls, no porous flux.
    pub fn homogeneous(mu: f64, alpha: f64, beta: f64, kappa: Permeability) -> Self {
        Self {
            mu,
            alpha,
            beta,
            kappa,
            f_s: Arc::new(|_| [0.0, 0.0]),
            f_d: Arc::new(|_| 0.0),
            g_u: Arc::new(|_| [0.0, 0.0]),
            g_n: Arc::new(|_, _| 0.0),
            g_p: Arc::new(|_| 0.0),
            pressure_sides: Vec::new(),
            interface_traction: None,
            convection: false,
        }
    }

    /// Default penalty `8 k^2`.
    pub fn default_beta(k: usize) -> f64 {
        8.0 * (k * k) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::InvalidData(format!("viscosity must be positive, got {}", self.mu)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidData(format!("BJS constant must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidData(format!("penalty must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// Whether an exterior porous facet carries pressure data.
    pub fn is_pressure_facet(&self, mesh: &Mesh, f: usize) -> bool {
        let facet = &mesh.facets[f];
        facet.class == FacetClass::ExteriorD && facet.side.is_some_and(|s| self.pressure_sides.contains(&s))
    }
}

/// Dense local matrix and load vector with global row/column dofs.
#[derive(Debug, Clone)]
pub struct LocalKernel {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub matrix: DMatrix<f64>,
    pub vector: DVector<f64>,
}

impl LocalKernel {
    pub fn new(rows: Vec<usize>, cols: Vec<usize>) -> Self {
        let (m, n) = (rows.len(), cols.len());
        Self { rows, cols, matrix: DMatrix::zeros(m, n), vector: DVector::zeros(m) }
    }

    /// Load-only kernel.
    pub fn load(rows: Vec<usize>) -> Self {
        Self::new(rows, Vec::new())
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().chain(self.vector.iter()).all(|v| v.is_finite())
    }
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// `a`-th component of `eps(phi e_b) n` for a scalar basis gradient `g`.
#[inline]
fn strain_normal(g: [f64; 2], phi_comp: usize, n: [f64; 2], a: usize) -> f64 {
    let delta = if a == phi_comp { dot(g, n) } else { 0.0 };
    0.5 * (delta + g[a] * n[phi_comp])
}

/// Bundles the objects every kernel needs.
pub struct FormContext<'a> {
    pub mesh: &'a Mesh,
    pub layout: &'a SpaceLayout,
    pub el: &'a Element,
    pub data: &'a ProblemData,
}

impl<'a> FormContext<'a> {
    pub fn new(mesh: &'a Mesh, layout: &'a SpaceLayout, el: &'a Element, data: &'a ProblemData) -> Self {
        assert_eq!(layout.k, el.k, "layout and element degree differ");
        Self { mesh, layout, el, data }
    }

    /// Cell velocity dofs followed by the facet velocity dofs of the three
    /// local facets.
    fn stokes_velocity_dofs(&self, c: usize) -> Vec<usize> {
        let mut dofs: Vec<usize> = self.layout.cell_velocity(c).collect();
        for &f in &self.mesh.cells[c].facets {
            dofs.extend(self.layout.facet_velocity(f).expect("free-flow cell facet carries velocity"));
        }
        dofs
    }

    fn require(&self, c: usize, sub: Subdomain) {
        assert_eq!(self.mesh.cells[c].subdomain, sub, "cell {c} has the wrong subdomain tag");
    }

    /// Interior-penalty viscous form on a free-flow cell.
    pub fn local_ahs(&self, c: usize) -> LocalKernel {
        self.require(c, Subdomain::Stokes);
        let dofs = self.stokes_velocity_dofs(c);
        let mut k = LocalKernel::new(dofs.clone(), dofs);
        let nk = self.el.n_vel();
        let nt = self.el.n_trace();
        let mu = self.data.mu;
        let cell = &self.mesh.cells[c];
        let pen = 2.0 * self.data.beta * mu / cell.diameter;
        let m = &mut k.matrix;

        for qp in self.el.cell_qps(self.mesh, c) {
            for i in 0..nk {
                for j in 0..nk {
                    let (gi, gj) = (qp.grad[i], qp.grad[j]);
                    let gg = dot(gi, gj);
                    for a in 0..2 {
                        for b in 0..2 {
                            let delta = if a == b { gg } else { 0.0 };
                            let ee = 0.5 * (delta + gi[b] * gj[a]);
                            m[(a * nk + i, b * nk + j)] += qp.w * 2.0 * mu * ee;
                        }
                    }
                }
            }
        }
        for slot in 0..3 {
            let off = 2 * nk + slot * 2 * nt;
            for qp in self.el.facet_qps(self.mesh, c, slot) {
                let n = qp.n;
                let w = qp.w;
                for i in 0..nk {
                    for a in 0..2 {
                        let row = a * nk + i;
                        for j in 0..nk {
                            for b in 0..2 {
                                let col = b * nk + j;
                                let mut v = 0.0;
                                if a == b {
                                    v += pen * qp.phi[i] * qp.phi[j];
                                }
                                v -= 2.0 * mu * qp.phi[i] * strain_normal(qp.grad[j], b, n, a);
                                v -= 2.0 * mu * qp.phi[j] * strain_normal(qp.grad[i], a, n, b);
                                m[(row, col)] += w * v;
                            }
                        }
                        for mm in 0..nt {
                            for b in 0..2 {
                                let col = off + b * nt + mm;
                                let mut v = 2.0 * mu * strain_normal(qp.grad[i], a, n, b) * qp.mu[mm];
                                if a == b {
                                    v -= pen * qp.phi[i] * qp.mu[mm];
                                }
                                m[(row, col)] += w * v;
                                m[(col, row)] += w * v;
                            }
                        }
                    }
                }
                for a in 0..2 {
                    for mm in 0..nt {
                        for nn in 0..nt {
                            m[(off + a * nt + mm, off + a * nt + nn)] += w * pen * qp.mu[mm] * qp.mu[nn];
                        }
                    }
                }
            }
        }
        k
    }

    /// Convection form linearised at `w` (the cell velocity coefficients of
    /// cell `c`), including the interface term on interface facets.
    pub fn local_th(&self, c: usize, w: &[f64]) -> LocalKernel {
        self.require(c, Subdomain::Stokes);
        let dofs = self.stokes_velocity_dofs(c);
        let mut k = LocalKernel::new(dofs.clone(), dofs);
        let nk = self.el.n_vel();
        let nt = self.el.n_trace();
        assert_eq!(w.len(), 2 * nk);
        let eval_w = |phi: &[f64]| -> [f64; 2] {
            let mut v = [0.0; 2];
            for i in 0..nk {
                v[0] += w[i] * phi[i];
                v[1] += w[nk + i] * phi[i];
            }
            v
        };
        let m = &mut k.matrix;
        for qp in self.el.cell_qps(self.mesh, c) {
            let wv = eval_w(&qp.phi);
            for i in 0..nk {
                let adv = dot(wv, qp.grad[i]);
                for j in 0..nk {
                    let v = -qp.w * qp.phi[j] * adv;
                    m[(i, j)] += v;
                    m[(nk + i, nk + j)] += v;
                }
            }
        }
        for slot in 0..3 {
            let off = 2 * nk + slot * 2 * nt;
            let interface = self.mesh.facets[self.mesh.cells[c].facets[slot]].class == FacetClass::Interface;
            for qp in self.el.facet_qps(self.mesh, c, slot) {
                let wn = dot(eval_w(&qp.phi), qp.n);
                let up = 0.5 * wn + 0.5 * wn.abs();
                let down = 0.5 * wn - 0.5 * wn.abs();
                for a in 0..2 {
                    for i in 0..nk {
                        for j in 0..nk {
                            m[(a * nk + i, a * nk + j)] += qp.w * up * qp.phi[i] * qp.phi[j];
                        }
                        for mm in 0..nt {
                            // test v, trial ubar
                            m[(a * nk + i, off + a * nt + mm)] += qp.w * down * qp.phi[i] * qp.mu[mm];
                            // test vbar, trial u
                            m[(off + a * nt + mm, a * nk + i)] -= qp.w * up * qp.mu[mm] * qp.phi[i];
                        }
                    }
                    for mm in 0..nt {
                        for nn in 0..nt {
                            let mut v = -down;
                            if interface {
                                v += wn;
                            }
                            m[(off + a * nt + mm, off + a * nt + nn)] += qp.w * v * qp.mu[mm] * qp.mu[nn];
                        }
                    }
                }
            }
        }
        k
    }

    /// Darcy mass form `mu kappa^{-1} u . v` on a porous cell.
    pub fn local_ad(&self, c: usize) -> Result<LocalKernel> {
        self.require(c, Subdomain::Darcy);
        let dofs: Vec<usize> = self.layout.cell_velocity(c).collect();
        let mut k = LocalKernel::new(dofs.clone(), dofs);
        let nk = self.el.n_vel();
        let mu = self.data.mu;
        for qp in self.el.cell_qps(self.mesh, c) {
            let kap = self.data.kappa.at(c, qp.x);
            let inv = spd_inverse(kap).ok_or(Error::NonSpdPermeability { cell: c, x: qp.x[0], y: qp.x[1] })?;
            for a in 0..2 {
                for b in 0..2 {
                    let coef = qp.w * mu * inv[a][b];
                    if coef == 0.0 {
                        continue;
                    }
                    for i in 0..nk {
                        for j in 0..nk {
                            k.matrix[(a * nk + i, b * nk + j)] += coef * qp.phi[i] * qp.phi[j];
                        }
                    }
                }
            }
        }
        Ok(k)
    }

    /// Beavers-Joseph-Saffman form on the facet velocity of an interface facet.
    pub fn local_ai(&self, f: usize) -> LocalKernel {
        let facet = &self.mesh.facets[f];
        assert_eq!(facet.class, FacetClass::Interface);
        let dofs: Vec<usize> = self.layout.facet_velocity(f).unwrap().collect();
        let mut k = LocalKernel::new(dofs.clone(), dofs);
        let nt = self.el.n_trace();
        let t = facet.tangent;
        let darcy_cell = facet.cells[1];
        for qp in self.el.trace_qps(self.mesh, f) {
            let kap = self.data.kappa.at(darcy_cell, qp.x);
            let kt = t[0] * (kap[0][0] * t[0] + kap[0][1] * t[1]) + t[1] * (kap[1][0] * t[0] + kap[1][1] * t[1]);
            let coef = qp.w * self.data.alpha * self.data.mu / kt.sqrt();
            for a in 0..2 {
                for b in 0..2 {
                    for mm in 0..nt {
                        for nn in 0..nt {
                            k.matrix[(a * nt + mm, b * nt + nn)] += coef * t[a] * t[b] * qp.mu[mm] * qp.mu[nn];
                        }
                    }
                }
            }
        }
        k
    }

    /// Pressure-velocity coupling on cell `c`: rows are the cell pressure
    /// followed by the subdomain's facet pressure on each local facet,
    /// columns the cell velocity. Entry `(q, v)` is `b_h(v, q)`.
    pub fn local_bh(&self, c: usize) -> LocalKernel {
        let cell = &self.mesh.cells[c];
        let nk = self.el.n_vel();
        let nt = self.el.n_trace();
        let np = self.el.n_pres();
        let mut rows: Vec<usize> = self.layout.cell_pressure(c).collect();
        for &f in &cell.facets {
            let r = match cell.subdomain {
                Subdomain::Stokes => self.layout.facet_pressure_s(f),
                Subdomain::Darcy => self.layout.facet_pressure_d(f),
            };
            rows.extend(r.expect("cell facet carries the subdomain facet pressure"));
        }
        let cols: Vec<usize> = self.layout.cell_velocity(c).collect();
        let mut k = LocalKernel::new(rows, cols);
        for qp in self.el.cell_qps(self.mesh, c) {
            for l in 0..np {
                for i in 0..nk {
                    for a in 0..2 {
                        k.matrix[(l, a * nk + i)] -= qp.w * qp.psi[l] * qp.grad[i][a];
                    }
                }
            }
        }
        for slot in 0..3 {
            let off = np + slot * nt;
            for qp in self.el.facet_qps(self.mesh, c, slot) {
                for mm in 0..nt {
                    for i in 0..nk {
                        for a in 0..2 {
                            k.matrix[(off + mm, a * nk + i)] += qp.w * qp.mu[mm] * qp.phi[i] * qp.n[a];
                        }
                    }
                }
            }
        }
        k
    }

    /// Facet pressure / facet velocity coupling `-int pbar^j vbar . n^j` on
    /// an interface facet (`j` either subdomain) or, for `j = Stokes`, on a
    /// free-flow exterior facet where the facet velocity is prescribed.
    pub fn local_bhi(&self, f: usize, j: Subdomain) -> LocalKernel {
        let facet = &self.mesh.facets[f];
        let (rows, sign): (Vec<usize>, f64) = match (facet.class, j) {
            (FacetClass::Interface, Subdomain::Stokes) | (FacetClass::ExteriorS, Subdomain::Stokes) => {
                (self.layout.facet_pressure_s(f).unwrap().collect(), 1.0)
            }
            (FacetClass::Interface, Subdomain::Darcy) => (self.layout.facet_pressure_d(f).unwrap().collect(), -1.0),
            _ => panic!("facet {f} of class {:?} has no {j:?} facet coupling", facet.class),
        };
        let cols: Vec<usize> = self.layout.facet_velocity(f).unwrap().collect();
        let mut k = LocalKernel::new(rows, cols);
        let nt = self.el.n_trace();
        let n = facet.normal;
        for qp in self.el.trace_qps(self.mesh, f) {
            for mm in 0..nt {
                for nn in 0..nt {
                    for b in 0..2 {
                        k.matrix[(mm, b * nt + nn)] -= qp.w * sign * n[b] * qp.mu[mm] * qp.mu[nn];
                    }
                }
            }
        }
        k
    }

    /// Mean-pressure constraint row `int_K p` for cell `c` (needs a multiplier).
    pub fn local_mean(&self, c: usize) -> LocalKernel {
        let lam = self.layout.multiplier().expect("layout has a multiplier");
        let cols: Vec<usize> = self.layout.cell_pressure(c).collect();
        let mut k = LocalKernel::new(vec![lam], cols);
        for qp in self.el.cell_qps(self.mesh, c) {
            for l in 0..self.el.n_pres() {
                k.matrix[(0, l)] += qp.w * qp.psi[l];
            }
        }
        k
    }

    /// Source loads: momentum source against the cell velocity on free-flow
    /// cells, `f_d - source_shift` against the cell pressure on porous cells.
    pub fn local_rhs(&self, c: usize, source_shift: f64) -> LocalKernel {
        let cell = &self.mesh.cells[c];
        match cell.subdomain {
            Subdomain::Stokes => {
                let nk = self.el.n_vel();
                let mut k = LocalKernel::load(self.layout.cell_velocity(c).collect());
                for qp in self.el.cell_qps(self.mesh, c) {
                    let f = (self.data.f_s)(qp.x);
                    for a in 0..2 {
                        for i in 0..nk {
                            k.vector[a * nk + i] += qp.w * f[a] * qp.phi[i];
                        }
                    }
                }
                k
            }
            Subdomain::Darcy => {
                let mut k = LocalKernel::load(self.layout.cell_pressure(c).collect());
                for qp in self.el.cell_qps(self.mesh, c) {
                    let f = (self.data.f_d)(qp.x) - source_shift;
                    for l in 0..self.el.n_pres() {
                        k.vector[l] += qp.w * f * qp.psi[l];
                    }
                }
                k
            }
        }
    }

    /// Boundary and interface data on facet `f`: the prescribed normal flux
    /// on porous exterior facets and the interface traction defect. Returns
    /// `None` when the facet carries no such data.
    pub fn bc_contributions(&self, f: usize) -> Option<LocalKernel> {
        let facet = &self.mesh.facets[f];
        let nt = self.el.n_trace();
        match facet.class {
            FacetClass::ExteriorD if !self.data.is_pressure_facet(self.mesh, f) => {
                let mut k = LocalKernel::load(self.layout.facet_pressure_d(f).unwrap().collect());
                for qp in self.el.trace_qps(self.mesh, f) {
                    let g = (self.data.g_n)(qp.x, facet.normal);
                    for mm in 0..nt {
                        k.vector[mm] += qp.w * g * qp.mu[mm];
                    }
                }
                Some(k)
            }
            FacetClass::Interface => {
                let traction = self.data.interface_traction.as_ref()?;
                let mut k = LocalKernel::load(self.layout.facet_velocity(f).unwrap().collect());
                for qp in self.el.trace_qps(self.mesh, f) {
                    let g = traction(qp.x);
                    for a in 0..2 {
                        for mm in 0..nt {
                            k.vector[a * nt + mm] += qp.w * g[a] * qp.mu[mm];
                        }
                    }
                }
                Some(k)
            }
            _ => None,
        }
    }
}

/// Inverse of a symmetric 2x2 matrix if it is positive definite.
pub fn spd_inverse(k: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = k[0][0] * k[1][1] - k[0][1] * k[1][0];
    if !(k[0][0] > 0.0 && det > 0.0) || !det.is_finite() {
        return None;
    }
    Some([[k[1][1] / det, -k[0][1] / det], [-k[1][0] / det, k[0][0] / det]])
}
