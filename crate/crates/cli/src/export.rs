//! Sampled fields in legacy ASCII VTK.

use std::fmt::Write as _;

use hdg_core::analysis::{Discrete, PressurePair, VelocityPair};
use hdg_core::element::Element;
use hdg_core::fespace::DiscreteField;
use hdg_core::forms::Permeability;
use hdg_core::mesh::{Mesh, Subdomain};

use crate::CliError;

/// Per-cell samples at cell centroids, plus the velocity at mesh vertices
/// averaged over the cells sharing the vertex (for stream tracing).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldExport {
    pub velocity: Vec<[f64; 2]>,
    pub pressure: Vec<f64>,
    /// 0 for free flow, 1 for porous cells.
    pub subdomain: Vec<u8>,
    /// Scalar permeability at the centroid; 0 on free-flow cells.
    pub permeability: Vec<f64>,
    pub point_velocity: Vec<[f64; 2]>,
}

impl FieldExport {
    pub fn sample(mesh: &Mesh, el: &Element, field: &DiscreteField, kappa: Option<&Permeability>) -> Self {
        let disc = Discrete::of(mesh, el, field);
        let nc = mesh.num_cells();
        let mut velocity = Vec::with_capacity(nc);
        let mut pressure = Vec::with_capacity(nc);
        let mut subdomain = Vec::with_capacity(nc);
        let mut permeability = Vec::with_capacity(nc);
        let mut sum = vec![[0.0; 2]; mesh.vertices.len()];
        let mut count = vec![0usize; mesh.vertices.len()];
        for (c, cell) in mesh.cells.iter().enumerate() {
            let x = mesh.centroid(c);
            velocity.push(VelocityPair::cell(&disc, c, x).0);
            pressure.push(PressurePair::cell(&disc, c, x));
            let darcy = cell.subdomain == Subdomain::Darcy;
            subdomain.push(darcy as u8);
            permeability.push(match (darcy, kappa) {
                (true, Some(k)) => k.at(c, x)[0][0],
                _ => 0.0,
            });
            for &v in &cell.vertices {
                let u = VelocityPair::cell(&disc, c, mesh.vertices[v]).0;
                sum[v][0] += u[0];
                sum[v][1] += u[1];
                count[v] += 1;
            }
        }
        let point_velocity = sum.iter().zip(&count).map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64]).collect();
        Self { velocity, pressure, subdomain, permeability, point_velocity }
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<(), CliError> {
        let nc = mesh.num_cells();
        if [self.velocity.len(), self.pressure.len(), self.subdomain.len(), self.permeability.len()]
            .iter()
            .any(|&n| n != nc)
            || self.point_velocity.len() != mesh.vertices.len()
        {
            return Err(CliError::Export("sample count does not match the mesh".into()));
        }
        let finite = self.velocity.iter().chain(&self.point_velocity).all(|u| u[0].is_finite() && u[1].is_finite())
            && self.pressure.iter().chain(&self.permeability).all(|v| v.is_finite());
        if !finite {
            return Err(CliError::Export("non-finite sample values".into()));
        }
        Ok(())
    }

    pub fn to_vtk(&self, mesh: &Mesh, title: &str) -> String {
        let mut s = String::with_capacity(160 * mesh.num_cells());
        writeln!(s, "# vtk DataFile Version 3.0").unwrap();
        writeln!(s, "{title}").unwrap();
        writeln!(s, "ASCII").unwrap();
        writeln!(s, "DATASET UNSTRUCTURED_GRID").unwrap();
        writeln!(s, "POINTS {} double", mesh.vertices.len()).unwrap();
        for v in &mesh.vertices {
            writeln!(s, "{} {} 0", num(v[0]), num(v[1])).unwrap();
        }
        writeln!(s, "CELLS {} {}", mesh.num_cells(), 4 * mesh.num_cells()).unwrap();
        for c in &mesh.cells {
            writeln!(s, "3 {} {} {}", c.vertices[0], c.vertices[1], c.vertices[2]).unwrap();
        }
        writeln!(s, "CELL_TYPES {}", mesh.num_cells()).unwrap();
        for _ in &mesh.cells {
            writeln!(s, "5").unwrap();
        }
        writeln!(s, "CELL_DATA {}", mesh.num_cells()).unwrap();
        writeln!(s, "VECTORS velocity double").unwrap();
        for u in &self.velocity {
            writeln!(s, "{} {} 0", num(u[0]), num(u[1])).unwrap();
        }
        scalars(&mut s, "velocity_magnitude", self.velocity.iter().map(|u| u[0].hypot(u[1])));
        scalars(&mut s, "pressure", self.pressure.iter().copied());
        scalars(&mut s, "permeability", self.permeability.iter().copied());
        writeln!(s, "SCALARS subdomain int 1").unwrap();
        writeln!(s, "LOOKUP_TABLE default").unwrap();
        for t in &self.subdomain {
            writeln!(s, "{t}").unwrap();
        }
        writeln!(s, "POINT_DATA {}", mesh.vertices.len()).unwrap();
        writeln!(s, "VECTORS velocity double").unwrap();
        for u in &self.point_velocity {
            writeln!(s, "{} {} 0", num(u[0]), num(u[1])).unwrap();
        }
        s
    }
}

/// Fixed-format float, identical on every platform.
fn num(v: f64) -> String {
    // avoid printing negative zero
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:.12e}")
}

fn scalars(s: &mut String, name: &str, vals: impl Iterator<Item = f64>) {
    writeln!(s, "SCALARS {name} double 1").unwrap();
    writeln!(s, "LOOKUP_TABLE default").unwrap();
    for v in vals {
        writeln!(s, "{}", num(v)).unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hdg_core::fespace::SpaceLayout;
    use hdg_core::mesh::{build_structured_mesh, DomainSpec};
    use std::sync::Arc;

    #[test]
    fn zero_field_layout() {
        let mesh = build_structured_mesh(&DomainSpec::new([0.0, 1.0], [0.0, 1.0], 0.5).unwrap(), 2).unwrap();
        let el = Element::with_default_rule(1);
        let field = DiscreteField::zeros(Arc::new(SpaceLayout::new(&mesh, 1, false)));
        let ex = FieldExport::sample(&mesh, &el, &field, Some(&Permeability::constant(2.0)));
        ex.validate(&mesh).unwrap();
        assert_eq!(ex.subdomain.iter().filter(|&&t| t == 1).count(), 4);
        assert!(ex.permeability.iter().zip(&ex.subdomain).all(|(k, t)| *k == 2.0 * *t as f64));
        let vtk = ex.to_vtk(&mesh, "t");
        assert!(vtk.starts_with("# vtk DataFile Version 3.0\nt\nASCII\n"));
        assert!(vtk.contains("CELL_DATA 8\nVECTORS velocity double\n0.000000000000e0 0.000000000000e0 0\n"));
        assert!(vtk.contains("POINT_DATA 9\n"));
        assert_eq!(vtk.lines().count(), 5 + 9 + 1 + 8 + 1 + 8 + 1 + 1 + 8 + 3 * (2 + 8) + 2 + 8 + 2 + 9);
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let mesh = build_structured_mesh(&DomainSpec::new([0.0, 1.0], [0.0, 1.0], 0.5).unwrap(), 2).unwrap();
        let el = Element::with_default_rule(1);
        let field = DiscreteField::zeros(Arc::new(SpaceLayout::new(&mesh, 1, false)));
        let mut ex = FieldExport::sample(&mesh, &el, &field, None);
        ex.pressure.pop();
        assert!(ex.validate(&mesh).is_err());
        ex.pressure.push(f64::NAN);
        assert!(ex.validate(&mesh).is_err());
    }
}
