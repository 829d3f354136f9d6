//! Per-cell and per-facet quadrature data: physical points, weights and
//! basis values mapped from the reference element.

use crate::mesh::{Mesh, Point};
use crate::polybasis::{quad_segment, quad_triangle, SegmentBasis, SegmentRule, TriangleBasis, TriangleRule};

/// Quadrature point inside a cell.
#[derive(Debug, Clone)]
pub struct CellQp {
    pub x: Point,
    /// Physical weight (reference weight times `det J`).
    pub w: f64,
    /// `P_k` values and physical gradients.
    pub phi: Vec<f64>,
    pub grad: Vec<[f64; 2]>,
    /// `P_{k-1}` values and physical gradients.
    pub psi: Vec<f64>,
    pub psi_grad: Vec<[f64; 2]>,
}

/// Quadrature point on one facet of a cell, seen from that cell.
#[derive(Debug, Clone)]
pub struct FacetQp {
    pub x: Point,
    /// Physical weight (reference weight times facet length).
    pub w: f64,
    /// Normal pointing out of the cell.
    pub n: [f64; 2],
    pub phi: Vec<f64>,
    pub grad: Vec<[f64; 2]>,
    pub psi: Vec<f64>,
    /// Facet `P_k` basis in the facet's own parametrisation.
    pub mu: Vec<f64>,
}

/// Quadrature point on a facet, without cell data.
#[derive(Debug, Clone)]
pub struct TraceQp {
    pub x: Point,
    pub w: f64,
    pub mu: Vec<f64>,
}

/// Reference data for polynomial degree `k` (velocity `P_k`, cell pressure
/// `P_{k-1}`, facet unknowns `P_k`).
#[derive(Debug, Clone)]
pub struct Element {
    pub k: usize,
    pub velocity: TriangleBasis,
    pub pressure: TriangleBasis,
    pub trace: SegmentBasis,
    pub cell_rule: TriangleRule,
    pub facet_rule: SegmentRule,
    ref_cell: Vec<(Vec<f64>, Vec<[f64; 2]>, Vec<f64>, Vec<[f64; 2]>)>,
}

pub(crate) fn map_grad(g: &[[f64; 2]; 2], r: [f64; 2]) -> [f64; 2] {
    // physical gradient = J^{-T} * reference gradient
    [g[0][0] * r[0] + g[1][0] * r[1], g[0][1] * r[0] + g[1][1] * r[1]]
}

impl Element {
    /// `k >= 1`; `quad_degree` is the exactness of both cell and facet rules.
    pub fn new(k: usize, quad_degree: usize) -> Self {
        assert!(k >= 1, "polynomial degree must be at least 1");
        let velocity = TriangleBasis::new(k);
        let pressure = TriangleBasis::new(k - 1);
        let cell_rule = quad_triangle(quad_degree).expect("quadrature degree within table");
        let facet_rule = quad_segment(quad_degree).expect("quadrature degree within table");
        let ref_cell = cell_rule
            .points
            .iter()
            .map(|&p| {
                let v = velocity.eval(p);
                let q = pressure.eval(p);
                (v.values, v.gradients, q.values, q.gradients)
            })
            .collect();
        Self { k, velocity, pressure, trace: SegmentBasis::new(k), cell_rule, facet_rule, ref_cell }
    }

    /// Element with the default assembly rule of degree `3k + 2`.
    pub fn with_default_rule(k: usize) -> Self {
        Self::new(k, 3 * k + 2)
    }

    pub fn n_vel(&self) -> usize {
        self.velocity.dim()
    }

    pub fn n_pres(&self) -> usize {
        self.pressure.dim()
    }

    pub fn n_trace(&self) -> usize {
        self.trace.dim()
    }

    pub fn cell_qps(&self, mesh: &Mesh, c: usize) -> Vec<CellQp> {
        let cell = &mesh.cells[c];
        let g = &cell.inverse_jacobian;
        self.cell_rule
            .points
            .iter()
            .zip(&self.cell_rule.weights)
            .zip(&self.ref_cell)
            .map(|((&p, &w), (phi, dphi, psi, dpsi))| CellQp {
                x: mesh.to_physical(c, p),
                w: w * cell.det,
                phi: phi.clone(),
                grad: dphi.iter().map(|&r| map_grad(g, r)).collect(),
                psi: psi.clone(),
                psi_grad: dpsi.iter().map(|&r| map_grad(g, r)).collect(),
            })
            .collect()
    }

    pub fn facet_qps(&self, mesh: &Mesh, c: usize, local: usize) -> Vec<FacetQp> {
        let cell = &mesh.cells[c];
        let f = cell.facets[local];
        let len = mesh.facets[f].length;
        let n = mesh.outward_normal(c, local);
        let g = &cell.inverse_jacobian;
        self.facet_rule
            .iter()
            .map(|(t, w)| {
                let x = mesh.facet_point(f, t);
                let p = mesh.to_reference(c, x);
                let v = self.velocity.eval(p);
                FacetQp {
                    x,
                    w: w * len,
                    n,
                    phi: v.values,
                    grad: v.gradients.iter().map(|&r| map_grad(g, r)).collect(),
                    psi: self.pressure.values(p),
                    mu: self.trace.values(t),
                }
            })
            .collect()
    }

    pub fn trace_qps(&self, mesh: &Mesh, f: usize) -> Vec<TraceQp> {
        let len = mesh.facets[f].length;
        self.facet_rule
            .iter()
            .map(|(t, w)| TraceQp { x: mesh.facet_point(f, t), w: w * len, mu: self.trace.values(t) })
            .collect()
    }
}
