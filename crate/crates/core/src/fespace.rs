//! Degree-of-freedom layout for the five discrete fields and the
//! projection / interpolation operators onto them.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::element::{map_grad, Element};
use crate::error::{Error, Result};
use crate::mesh::{FacetClass, Mesh, Point};
use crate::polybasis::{dim_triangle, quad_segment, quad_triangle, SegmentBasis, TriangleBasis};

/// Global numbering of
/// cell velocity `u_h` (vector `P_k`), cell pressure `p_h` (`P_{k-1}`),
/// facet velocity on the free-flow skeleton (vector `P_k`),
/// facet pressures on the free-flow and porous skeletons (`P_k`),
/// and an optional mean-pressure multiplier.
///
/// Cell blocks come first and are contiguous per cell (`[u_x | u_y | p]`),
/// so static condensation can eliminate them cell by cell. Facet blocks
/// follow, contiguous per facet (`[ubar_x | ubar_y | pbar_s]`, then `pbar_d`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceLayout {
    pub k: usize,
    n_vel: usize,
    n_pres: usize,
    n_trace: usize,
    n_cells: usize,
    facet_vel: Vec<Option<usize>>,
    facet_ps: Vec<Option<usize>>,
    facet_pd: Vec<Option<usize>>,
    multiplier: Option<usize>,
    total: usize,
}

impl SpaceLayout {
    pub fn new(mesh: &Mesh, k: usize, with_multiplier: bool) -> Self {
        assert!(k >= 1);
        let n_vel = 2 * dim_triangle(k);
        let n_pres = dim_triangle(k - 1);
        let n_trace = k + 1;
        let n_cells = mesh.num_cells();
        let mut next = n_cells * (n_vel + n_pres);
        let mut facet_vel = vec![None; mesh.num_facets()];
        let mut facet_ps = vec![None; mesh.num_facets()];
        let mut facet_pd = vec![None; mesh.num_facets()];
        for (f, facet) in mesh.facets.iter().enumerate() {
            if facet.class.on_stokes_skeleton() {
                facet_vel[f] = Some(next);
                next += 2 * n_trace;
                facet_ps[f] = Some(next);
                next += n_trace;
            }
            if facet.class.on_darcy_skeleton() {
                facet_pd[f] = Some(next);
                next += n_trace;
            }
        }
        let multiplier = if with_multiplier {
            next += 1;
            Some(next - 1)
        } else {
            None
        };
        Self { k, n_vel, n_pres, n_trace, n_cells, facet_vel, facet_ps, facet_pd, multiplier, total: next }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_cells(&self) -> usize {
        self.n_cells
    }

    pub fn num_facets(&self) -> usize {
        self.facet_vel.len()
    }

    /// Velocity dofs per cell (`2 dim P_k`).
    pub fn n_vel(&self) -> usize {
        self.n_vel
    }

    /// Pressure dofs per cell (`dim P_{k-1}`).
    pub fn n_pres(&self) -> usize {
        self.n_pres
    }

    /// Dofs per facet and scalar component (`k + 1`).
    pub fn n_trace(&self) -> usize {
        self.n_trace
    }

    pub fn cell_block(&self, c: usize) -> std::ops::Range<usize> {
        let start = c * (self.n_vel + self.n_pres);
        start..start + self.n_vel + self.n_pres
    }

    pub fn cell_velocity(&self, c: usize) -> std::ops::Range<usize> {
        let start = c * (self.n_vel + self.n_pres);
        start..start + self.n_vel
    }

    pub fn cell_pressure(&self, c: usize) -> std::ops::Range<usize> {
        let start = c * (self.n_vel + self.n_pres) + self.n_vel;
        start..start + self.n_pres
    }

    /// Number of cell-interior dofs (all of which precede facet dofs).
    pub fn num_cell_dofs(&self) -> usize {
        self.n_cells * (self.n_vel + self.n_pres)
    }

    pub fn facet_velocity(&self, f: usize) -> Option<std::ops::Range<usize>> {
        self.facet_vel[f].map(|s| s..s + 2 * self.n_trace)
    }

    pub fn facet_pressure_s(&self, f: usize) -> Option<std::ops::Range<usize>> {
        self.facet_ps[f].map(|s| s..s + self.n_trace)
    }

    pub fn facet_pressure_d(&self, f: usize) -> Option<std::ops::Range<usize>> {
        self.facet_pd[f].map(|s| s..s + self.n_trace)
    }

    pub fn multiplier(&self) -> Option<usize> {
        self.multiplier
    }

    /// Count reproduced from mesh data alone.
    pub fn expected_total(mesh: &Mesh, k: usize, with_multiplier: bool) -> usize {
        let nk = dim_triangle(k);
        let nt = k + 1;
        let s_facets = mesh.facets.iter().filter(|f| f.class.on_stokes_skeleton()).count();
        let d_facets = mesh.facets.iter().filter(|f| f.class.on_darcy_skeleton()).count();
        mesh.num_cells() * (2 * nk + dim_triangle(k - 1)) + s_facets * 3 * nt + d_facets * nt + with_multiplier as usize
    }

    /// One-line textual descriptor used in serialized fields.
    pub fn descriptor(&self) -> String {
        format!(
            "k={} cells={} facets={} multiplier={} total={}",
            self.k,
            self.n_cells,
            self.num_facets(),
            self.multiplier.is_some(),
            self.total
        )
    }
}

/// Coefficient vector over a [`SpaceLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteField {
    pub layout: Arc<SpaceLayout>,
    pub values: Vec<f64>,
    /// Constant removed from the porous source so that the discrete data
    /// are exactly compatible with the boundary fluxes (zero when a
    /// pressure boundary condition is present).
    pub source_shift: f64,
}

impl DiscreteField {
    pub fn zeros(layout: Arc<SpaceLayout>) -> Self {
        let n = layout.total();
        Self { layout, values: vec![0.0; n], source_shift: 0.0 }
    }

    pub fn from_values(layout: Arc<SpaceLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::DimensionMismatch { expected: layout.total(), got: values.len() });
        }
        Ok(Self { layout, values, source_shift: 0.0 })
    }

    pub fn cell_velocity(&self, c: usize) -> &[f64] {
        &self.values[self.layout.cell_velocity(c)]
    }

    pub fn cell_pressure(&self, c: usize) -> &[f64] {
        &self.values[self.layout.cell_pressure(c)]
    }

    pub fn facet_velocity(&self, f: usize) -> Option<&[f64]> {
        self.layout.facet_velocity(f).map(|r| &self.values[r])
    }

    pub fn facet_pressure_s(&self, f: usize) -> Option<&[f64]> {
        self.layout.facet_pressure_s(f).map(|r| &self.values[r])
    }

    pub fn facet_pressure_d(&self, f: usize) -> Option<&[f64]> {
        self.layout.facet_pressure_d(f).map(|r| &self.values[r])
    }

    /// Copies a vector cell field into the cell velocity blocks.
    pub fn set_cell_velocity(&mut self, u: &CellPolyField) {
        assert_eq!(u.ncomp, 2);
        assert_eq!(u.degree, self.layout.k);
        for c in 0..self.layout.num_cells() {
            let r = self.layout.cell_velocity(c);
            self.values[r].copy_from_slice(u.block(c));
        }
    }

    pub fn set_cell_pressure(&mut self, p: &CellPolyField) {
        assert_eq!(p.ncomp, 1);
        assert_eq!(p.degree + 1, self.layout.k);
        for c in 0..self.layout.num_cells() {
            let r = self.layout.cell_pressure(c);
            self.values[r].copy_from_slice(p.block(c));
        }
    }

    pub fn cell_velocity_field(&self) -> CellPolyField {
        let n = self.layout.n_vel();
        let mut values = Vec::with_capacity(n * self.layout.num_cells());
        for c in 0..self.layout.num_cells() {
            values.extend_from_slice(self.cell_velocity(c));
        }
        CellPolyField { degree: self.layout.k, ncomp: 2, dim: n / 2, values }
    }

    pub fn cell_pressure_field(&self) -> CellPolyField {
        let n = self.layout.n_pres();
        let mut values = Vec::with_capacity(n * self.layout.num_cells());
        for c in 0..self.layout.num_cells() {
            values.extend_from_slice(self.cell_pressure(c));
        }
        CellPolyField { degree: self.layout.k - 1, ncomp: 1, dim: n, values }
    }

    /// Subtracts the mean of the cell pressure from the cell blocks only.
    pub fn enforce_zero_mean(&mut self, mesh: &Mesh) {
        let mut p = self.cell_pressure_field();
        enforce_zero_mean(mesh, &mut p);
        self.set_cell_pressure(&p);
    }

    /// Text serialization: a descriptor line, the source shift, then one
    /// coefficient per line in round-trip precision.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(24 * self.values.len() + 128);
        writeln!(s, "hdg-field v1 {}", self.layout.descriptor()).unwrap();
        writeln!(s, "source_shift {:?}", self.source_shift).unwrap();
        for v in &self.values {
            writeln!(s, "{v:?}").unwrap();
        }
        s
    }

    pub fn from_text(layout: Arc<SpaceLayout>, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let expected = format!("hdg-field v1 {}", layout.descriptor());
        if header != expected {
            return Err(Error::InvalidData(format!("field header `{header}` does not match layout `{expected}`")));
        }
        let shift_line = lines.next().unwrap_or_default();
        let source_shift = shift_line
            .strip_prefix("source_shift ")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidData("missing source_shift line".into()))?;
        let values = lines
            .map(|l| l.trim().parse::<f64>().map_err(|e| Error::InvalidData(format!("bad coefficient `{l}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut field = Self::from_values(layout, values)?;
        field.source_shift = source_shift;
        Ok(field)
    }
}

/// Broken polynomial field of one degree on every cell, stored in the
/// orthonormal reference basis, component-major per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPolyField {
    pub degree: usize,
    pub ncomp: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl CellPolyField {
    pub fn zeros(mesh: &Mesh, degree: usize, ncomp: usize) -> Self {
        let dim = dim_triangle(degree);
        Self { degree, ncomp, dim, values: vec![0.0; mesh.num_cells() * ncomp * dim] }
    }

    pub fn block(&self, c: usize) -> &[f64] {
        let n = self.ncomp * self.dim;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn block_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.ncomp * self.dim;
        &mut self.values[c * n..(c + 1) * n]
    }

    /// Component values at a physical point inside cell `c`.
    pub fn eval(&self, mesh: &Mesh, basis: &TriangleBasis, c: usize, x: Point) -> Vec<f64> {
        let phi = basis.values(mesh.to_reference(c, x));
        let b = self.block(c);
        (0..self.ncomp).map(|a| (0..self.dim).map(|i| b[a * self.dim + i] * phi[i]).sum()).collect()
    }
}

/// Cellwise L2 projection of `f(cell, x)` onto scalar `P_degree`.
pub fn project_cell<F>(mesh: &Mesh, degree: usize, quad_degree: usize, f: F) -> CellPolyField
where
    F: Fn(usize, Point) -> f64 + Sync,
{
    project_cell_components(mesh, degree, quad_degree, 1, |c, x| vec![f(c, x)])
}

/// Cellwise L2 projection of a vector field onto `[P_degree]^2`.
pub fn project_cell_vector<F>(mesh: &Mesh, degree: usize, quad_degree: usize, f: F) -> CellPolyField
where
    F: Fn(usize, Point) -> [f64; 2] + Sync,
{
    project_cell_components(mesh, degree, quad_degree, 2, |c, x| f(c, x).to_vec())
}

fn project_cell_components<F>(mesh: &Mesh, degree: usize, quad_degree: usize, ncomp: usize, f: F) -> CellPolyField
where
    F: Fn(usize, Point) -> Vec<f64> + Sync,
{
    let basis = TriangleBasis::new(degree);
    let rule = quad_triangle(quad_degree).expect("quadrature degree within table");
    let ref_vals: Vec<Vec<f64>> = rule.points.iter().map(|&p| basis.values(p)).collect();
    let dim = basis.dim();
    let blocks: Vec<Vec<f64>> = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| {
            // orthonormal reference basis: physical mass matrix is det * I
            let mut out = vec![0.0; ncomp * dim];
            for ((p, w), phi) in rule.iter().zip(&ref_vals) {
                let v = f(c, mesh.to_physical(c, p));
                for a in 0..ncomp {
                    for i in 0..dim {
                        out[a * dim + i] += w * v[a] * phi[i];
                    }
                }
            }
            out
        })
        .collect();
    CellPolyField { degree, ncomp, dim, values: blocks.concat() }
}

/// Which facet space a facet projection targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FacetSpace {
    /// Free-flow facet velocity (vector).
    Velocity,
    /// Free-flow facet pressure.
    PressureS,
    /// Porous facet pressure.
    PressureD,
}

impl FacetSpace {
    pub fn contains(self, class: FacetClass) -> bool {
        match self {
            FacetSpace::Velocity | FacetSpace::PressureS => class.on_stokes_skeleton(),
            FacetSpace::PressureD => class.on_darcy_skeleton(),
        }
    }

    pub fn ncomp(self) -> usize {
        match self {
            FacetSpace::Velocity => 2,
            _ => 1,
        }
    }
}

/// Per-facet polynomial coefficients in the orthonormal Legendre basis of
/// the facet parameter; facets outside the space hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FacetPolyField {
    pub space: FacetSpace,
    pub degree: usize,
    pub values: Vec<f64>,
}

impl FacetPolyField {
    pub fn block(&self, f: usize) -> &[f64] {
        let n = self.space.ncomp() * (self.degree + 1);
        &self.values[f * n..(f + 1) * n]
    }

    /// Component values at facet parameter `t`.
    pub fn eval(&self, f: usize, t: f64) -> Vec<f64> {
        let mu = SegmentBasis::new(self.degree).values(t);
        let b = self.block(f);
        let m = self.degree + 1;
        (0..self.space.ncomp()).map(|a| (0..m).map(|i| b[a * m + i] * mu[i]).sum()).collect()
    }
}

/// Facetwise L2 projection onto `P_degree(F)` (per component).
/// `f(facet, x)` returns one value per component.
pub fn project_facet<F>(mesh: &Mesh, space: FacetSpace, degree: usize, quad_degree: usize, f: F) -> FacetPolyField
where
    F: Fn(usize, Point) -> Vec<f64> + Sync,
{
    let basis = SegmentBasis::new(degree);
    let rule = quad_segment(quad_degree).expect("quadrature degree within table");
    let ncomp = space.ncomp();
    let m = degree + 1;
    let blocks: Vec<Vec<f64>> = (0..mesh.num_facets())
        .into_par_iter()
        .map(|fid| {
            let mut out = vec![0.0; ncomp * m];
            if !space.contains(mesh.facets[fid].class) {
                return out;
            }
            // orthonormal on [0,1]: physical mass matrix is |F| * I, so the
            // |F| factors cancel
            for (t, w) in rule.iter() {
                let v = f(fid, mesh.facet_point(fid, t));
                let mu = basis.values(t);
                for a in 0..ncomp {
                    for i in 0..m {
                        out[a * m + i] += w * v[a] * mu[i];
                    }
                }
            }
            out
        })
        .collect();
    FacetPolyField { space, degree, values: blocks.concat() }
}

/// Canonical BDM_k interpolant of a smooth vector field.
///
/// Degrees of freedom per cell: normal moments against `P_k(F)` on each
/// edge (using the facet's global normal), moments against gradients of
/// non-constant `P_{k-1}` functions, and moments against curls of
/// `b_K P_{k-2}` with `b_K` the cubic bubble.
pub fn bdm_interpolate<F>(mesh: &Mesh, k: usize, quad_degree: usize, u: F) -> Result<CellPolyField>
where
    F: Fn(usize, Point) -> [f64; 2] + Sync,
{
    if k < 1 {
        return Err(Error::InvalidData("BDM interpolation needs k >= 1".into()));
    }
    let el = Element::new(k, quad_degree);
    let bubble_space = if k >= 2 { Some(TriangleBasis::new(k - 2)) } else { None };
    let nk = el.n_vel();
    let blocks: Vec<Result<Vec<f64>>> = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| {
            let cell = &mesh.cells[c];
            let g = &cell.inverse_jacobian;
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * nk);
            let mut rhs: Vec<f64> = Vec::with_capacity(2 * nk);
            for local in 0..3 {
                let f = cell.facets[local];
                let n = mesh.facets[f].normal;
                let qps = el.facet_qps(mesh, c, local);
                for j in 0..el.n_trace() {
                    let mut row = vec![0.0; 2 * nk];
                    let mut r = 0.0;
                    for qp in &qps {
                        let uv = u(c, qp.x);
                        for i in 0..nk {
                            row[i] += qp.w * qp.phi[i] * n[0] * qp.mu[j];
                            row[nk + i] += qp.w * qp.phi[i] * n[1] * qp.mu[j];
                        }
                        r += qp.w * (uv[0] * n[0] + uv[1] * n[1]) * qp.mu[j];
                    }
                    rows.push(row);
                    rhs.push(r);
                }
            }
            let cqps = el.cell_qps(mesh, c);
            for q in 1..el.n_pres() {
                let mut row = vec![0.0; 2 * nk];
                let mut r = 0.0;
                for qp in &cqps {
                    let gq = qp.psi_grad[q];
                    let uv = u(c, qp.x);
                    for i in 0..nk {
                        row[i] += qp.w * qp.phi[i] * gq[0];
                        row[nk + i] += qp.w * qp.phi[i] * gq[1];
                    }
                    r += qp.w * (uv[0] * gq[0] + uv[1] * gq[1]);
                }
                rows.push(row);
                rhs.push(r);
            }
            if let Some(bs) = &bubble_space {
                for q in 0..bs.dim() {
                    let mut row = vec![0.0; 2 * nk];
                    let mut r = 0.0;
                    for (qp, &p) in cqps.iter().zip(&el.cell_rule.points) {
                        let e = bs.eval(p);
                        let (x, y) = (p[0], p[1]);
                        let l0 = 1.0 - x - y;
                        let b = l0 * x * y;
                        let db = [-x * y + l0 * y, -x * y + l0 * x];
                        let dpsi_ref = [e.gradients[q][0] * b + e.values[q] * db[0], e.gradients[q][1] * b + e.values[q] * db[1]];
                        let dpsi = map_grad(g, dpsi_ref);
                        let curl = [dpsi[1], -dpsi[0]];
                        let uv = u(c, qp.x);
                        for i in 0..nk {
                            row[i] += qp.w * qp.phi[i] * curl[0];
                            row[nk + i] += qp.w * qp.phi[i] * curl[1];
                        }
                        r += qp.w * (uv[0] * curl[0] + uv[1] * curl[1]);
                    }
                    rows.push(row);
                    rhs.push(r);
                }
            }
            debug_assert_eq!(rows.len(), 2 * nk);
            let a = DMatrix::from_fn(2 * nk, 2 * nk, |i, j| rows[i][j]);
            let b = DVector::from_vec(rhs);
            let x = a.lu().solve(&b).ok_or(Error::SingularLocalBlock { cell: c })?;
            Ok(x.as_slice().to_vec())
        })
        .collect();
    let mut values = Vec::with_capacity(mesh.num_cells() * 2 * nk);
    for b in blocks {
        values.extend(b?);
    }
    Ok(CellPolyField { degree: k, ncomp: 2, dim: nk, values })
}

/// Subtracts the domain mean from a scalar cell field.
pub fn enforce_zero_mean(mesh: &Mesh, p: &mut CellPolyField) {
    assert_eq!(p.ncomp, 1);
    // With the orthonormal basis, only function 0 (the constant sqrt 2) has
    // a nonzero integral: int_K phi_0 = det / sqrt 2.
    let phi0 = std::f64::consts::SQRT_2;
    let mut integral = 0.0;
    for (c, cell) in mesh.cells.iter().enumerate() {
        integral += p.block(c)[0] * cell.det / phi0;
    }
    let mean = integral / mesh.spec.area();
    for c in 0..mesh.num_cells() {
        p.block_mut(c)[0] -= mean / phi0;
    }
}

/// Integral of a scalar cell field over the domain.
pub fn integrate_cell_field(mesh: &Mesh, p: &CellPolyField) -> f64 {
    assert_eq!(p.ncomp, 1);
    let basis = TriangleBasis::new(p.degree);
    let rule = quad_triangle(p.degree).expect("degree within table");
    let mut total = 0.0;
    for (c, cell) in mesh.cells.iter().enumerate() {
        for (pt, w) in rule.iter() {
            let v: f64 = basis.values(pt).iter().zip(p.block(c)).map(|(a, b)| a * b).sum();
            total += w * cell.det * v;
        }
    }
    total
}
