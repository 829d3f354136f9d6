//! Conforming triangulations of a rectangle split horizontally into a
//! free-flow part (above the interface) and a porous part (below it).

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subdomain {
    /// Free flow (Navier-Stokes) region.
    Stokes,
    /// Porous (Darcy) region.
    Darcy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FacetClass {
    InteriorS,
    InteriorD,
    Interface,
    ExteriorS,
    ExteriorD,
}

impl FacetClass {
    /// Facets carrying free-flow facet unknowns (velocity and pressure).
    pub fn on_stokes_skeleton(self) -> bool {
        matches!(self, FacetClass::InteriorS | FacetClass::Interface | FacetClass::ExteriorS)
    }

    /// Facets carrying the porous-region facet pressure.
    pub fn on_darcy_skeleton(self) -> bool {
        matches!(self, FacetClass::InteriorD | FacetClass::Interface | FacetClass::ExteriorD)
    }

    pub fn is_exterior(self) -> bool {
        matches!(self, FacetClass::ExteriorS | FacetClass::ExteriorD)
    }
}

/// Side of the bounding rectangle an exterior facet lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundarySide {
    Left,
    Right,
    Bottom,
    Top,
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]` cut at `y = interface_y`.
/// The free-flow region lies above the cut.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub interface_y: f64,
}

impl DomainSpec {
    pub fn new(x: [f64; 2], y: [f64; 2], interface_y: f64) -> Result<Self> {
        let spec = Self { x, y, interface_y };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x[0] < self.x[1]) || !(self.y[0] < self.y[1]) {
            return Err(Error::InvalidDomain(format!("empty rectangle {:?} x {:?}", self.x, self.y)));
        }
        if !(self.y[0] < self.interface_y && self.interface_y < self.y[1]) {
            return Err(Error::InvalidDomain(format!(
                "interface ordinate {} not strictly inside ({}, {})",
                self.interface_y, self.y[0], self.y[1]
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x[1] - self.x[0]) * (self.y[1] - self.y[0])
    }

    pub fn subdomain_of(&self, p: Point) -> Subdomain {
        if p[1] > self.interface_y {
            Subdomain::Stokes
        } else {
            Subdomain::Darcy
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub vertices: [usize; 3],
    pub subdomain: Subdomain,
    /// Facet opposite local vertex `i`.
    pub facets: [usize; 3],
    /// `+1` if the stored facet normal points out of this cell, `-1` otherwise.
    pub facet_signs: [f64; 3],
    /// Columns are the edge vectors `v1 - v0` and `v2 - v0`.
    pub jacobian: [[f64; 2]; 2],
    pub inverse_jacobian: [[f64; 2]; 2],
    pub det: f64,
    /// Longest edge.
    pub diameter: f64,
}

impl Cell {
    pub fn area(&self) -> f64 {
        0.5 * self.det
    }
}

#[derive(Debug, Clone)]
pub struct Facet {
    /// Ordered so that `vertices[1] - vertices[0]` points along `tangent`.
    pub vertices: [usize; 2],
    pub class: FacetClass,
    /// `cells[0]` is the cell the normal points out of (the free-flow
    /// cell on interface facets).
    pub cells: [usize; 2],
    pub n_cells: usize,
    pub normal: [f64; 2],
    pub tangent: [f64; 2],
    pub length: f64,
    pub side: Option<BoundarySide>,
}

impl Facet {
    pub fn adjacent(&self) -> &[usize] {
        &self.cells[..self.n_cells]
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub spec: DomainSpec,
    pub vertices: Vec<Point>,
    pub cells: Vec<Cell>,
    pub facets: Vec<Facet>,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

fn grid_count(len: f64, n: usize, what: &str) -> Result<usize> {
    let cells = len * n as f64;
    let rounded = cells.round();
    if rounded < 1.0 || (cells - rounded).abs() > 1e-8 {
        return Err(Error::InvalidDomain(format!(
            "{what} of length {len} is not a positive multiple of the grid spacing 1/{n}"
        )));
    }
    Ok(rounded as usize)
}

/// Uniform triangulation with grid spacing `1 / n`: every grid square is
/// cut by one diagonal, with the diagonal direction alternating in a
/// checkerboard pattern. A grid row always ends at the interface.
pub fn build_structured_mesh(spec: &DomainSpec, n: usize) -> Result<Mesh> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidDomain("cells per unit length must be at least 1".into()));
    }
    let nx = grid_count(spec.x[1] - spec.x[0], n, "x-interval")?;
    let nd = grid_count(spec.interface_y - spec.y[0], n, "porous y-interval")?;
    let ns = grid_count(spec.y[1] - spec.interface_y, n, "free-flow y-interval")?;
    let ny = nd + ns;

    let ys: Vec<f64> = (0..=ny)
        .map(|j| {
            if j <= nd {
                spec.y[0] + (spec.interface_y - spec.y[0]) * j as f64 / nd as f64
            } else {
                spec.interface_y + (spec.y[1] - spec.interface_y) * (j - nd) as f64 / ns as f64
            }
        })
        .collect();
    let xs: Vec<f64> = (0..=nx).map(|i| spec.x[0] + (spec.x[1] - spec.x[0]) * i as f64 / nx as f64).collect();

    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for &y in &ys {
        for &x in &xs {
            vertices.push([x, y]);
        }
    }
    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut cells = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        let sub = if j < nd { Subdomain::Darcy } else { Subdomain::Stokes };
        for i in 0..nx {
            let (v00, v10, v01, v11) = (vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1));
            if (i + j) % 2 == 0 {
                cells.push(([v00, v10, v11], sub));
                cells.push(([v00, v11, v01], sub));
            } else {
                cells.push(([v00, v10, v01], sub));
                cells.push(([v10, v11, v01], sub));
            }
        }
    }
    Mesh::from_cells(*spec, vertices, cells)
}

/// Red refinement: every triangle is split into four similar ones through
/// its edge midpoints. Subdomain tags are inherited.
pub fn refine_uniform(mesh: &Mesh) -> Mesh {
    let mut vertices = mesh.vertices.clone();
    let mut midpoint_of_facet = vec![usize::MAX; mesh.facets.len()];
    for (f, facet) in mesh.facets.iter().enumerate() {
        let a = mesh.vertices[facet.vertices[0]];
        let b = mesh.vertices[facet.vertices[1]];
        midpoint_of_facet[f] = vertices.len();
        vertices.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
    }
    let mut cells = Vec::with_capacity(4 * mesh.cells.len());
    for cell in &mesh.cells {
        let [v0, v1, v2] = cell.vertices;
        // facet i is opposite vertex i
        let m12 = midpoint_of_facet[cell.facets[0]];
        let m20 = midpoint_of_facet[cell.facets[1]];
        let m01 = midpoint_of_facet[cell.facets[2]];
        let s = cell.subdomain;
        cells.push(([v0, m01, m20], s));
        cells.push(([m01, v1, m12], s));
        cells.push(([m20, m12, v2], s));
        cells.push(([m01, m12, m20], s));
    }
    Mesh::from_cells(mesh.spec, vertices, cells).expect("refinement of a valid mesh is valid")
}

impl Mesh {
    /// Builds cell geometry and the classified facet list from raw cells.
    pub fn from_cells(spec: DomainSpec, vertices: Vec<Point>, raw: Vec<([usize; 3], Subdomain)>) -> Result<Self> {
        let mut cells = Vec::with_capacity(raw.len());
        for (c, (v, subdomain)) in raw.iter().enumerate() {
            let p0 = vertices[v[0]];
            let e1 = sub(vertices[v[1]], p0);
            let e2 = sub(vertices[v[2]], p0);
            let det = e1[0] * e2[1] - e1[1] * e2[0];
            if !(det > 0.0) {
                return Err(Error::InvalidDomain(format!("cell {c} is degenerate or negatively oriented")));
            }
            let jacobian = [[e1[0], e2[0]], [e1[1], e2[1]]];
            let inverse_jacobian = [[e2[1] / det, -e2[0] / det], [-e1[1] / det, e1[0] / det]];
            let e3 = sub(vertices[v[2]], vertices[v[1]]);
            let diameter = norm(e1).max(norm(e2)).max(norm(e3));
            cells.push(Cell {
                vertices: *v,
                subdomain: *subdomain,
                facets: [usize::MAX; 3],
                facet_signs: [1.0; 3],
                jacobian,
                inverse_jacobian,
                det,
                diameter,
            });
        }

        // edge -> (facet id); ids assigned in order of first encounter
        let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
        let mut incidence: Vec<Vec<(usize, usize)>> = Vec::new();
        let mut edge_vertices: Vec<[usize; 2]> = Vec::new();
        for (c, cell) in cells.iter().enumerate() {
            for i in 0..3 {
                let a = cell.vertices[(i + 1) % 3];
                let b = cell.vertices[(i + 2) % 3];
                let key = (a.min(b), a.max(b));
                let id = *lookup.entry(key).or_insert_with(|| {
                    incidence.push(Vec::new());
                    edge_vertices.push([a, b]);
                    incidence.len() - 1
                });
                incidence[id].push((c, i));
            }
        }

        let tol = 1e-10 * (spec.x[1] - spec.x[0]).max(spec.y[1] - spec.y[0]);
        let mut facets = Vec::with_capacity(incidence.len());
        for (f, inc) in incidence.iter().enumerate() {
            let (class, owner_pos) = match inc.len() {
                1 => {
                    let class = match cells[inc[0].0].subdomain {
                        Subdomain::Stokes => FacetClass::ExteriorS,
                        Subdomain::Darcy => FacetClass::ExteriorD,
                    };
                    (class, 0)
                }
                2 => {
                    let s0 = cells[inc[0].0].subdomain;
                    let s1 = cells[inc[1].0].subdomain;
                    match (s0, s1) {
                        (Subdomain::Stokes, Subdomain::Stokes) => (FacetClass::InteriorS, 0),
                        (Subdomain::Darcy, Subdomain::Darcy) => (FacetClass::InteriorD, 0),
                        (Subdomain::Stokes, Subdomain::Darcy) => (FacetClass::Interface, 0),
                        (Subdomain::Darcy, Subdomain::Stokes) => (FacetClass::Interface, 1),
                    }
                }
                m => return Err(Error::InvalidDomain(format!("edge {f} shared by {m} cells (non-conforming mesh)"))),
            };
            let owner = inc[owner_pos].0;
            let other = if inc.len() == 2 { Some(inc[1 - owner_pos].0) } else { None };

            let [mut a, mut b] = edge_vertices[f];
            let centroid = cell_centroid(&vertices, &cells[owner]);
            let mid = [0.5 * (vertices[a][0] + vertices[b][0]), 0.5 * (vertices[a][1] + vertices[b][1])];
            let mut t = sub(vertices[b], vertices[a]);
            let length = norm(t);
            let mut nrm = [t[1] / length, -t[0] / length];
            let out = sub(mid, centroid);
            if nrm[0] * out[0] + nrm[1] * out[1] < 0.0 {
                std::mem::swap(&mut a, &mut b);
                t = sub(vertices[b], vertices[a]);
                nrm = [t[1] / length, -t[0] / length];
            }
            let tangent = [t[0] / length, t[1] / length];

            let side = if inc.len() == 1 {
                Some(if (mid[0] - spec.x[0]).abs() < tol {
                    BoundarySide::Left
                } else if (mid[0] - spec.x[1]).abs() < tol {
                    BoundarySide::Right
                } else if (mid[1] - spec.y[0]).abs() < tol {
                    BoundarySide::Bottom
                } else if (mid[1] - spec.y[1]).abs() < tol {
                    BoundarySide::Top
                } else {
                    return Err(Error::InvalidDomain(format!("boundary facet {f} is not on the bounding rectangle")));
                })
            } else {
                None
            };

            facets.push(Facet {
                vertices: [a, b],
                class,
                cells: [owner, other.unwrap_or(usize::MAX)],
                n_cells: inc.len(),
                normal: nrm,
                tangent,
                length,
                side,
            });
            for &(c, i) in inc {
                cells[c].facets[i] = f;
                cells[c].facet_signs[i] = if c == owner { 1.0 } else { -1.0 };
            }
        }
        Ok(Self { spec, vertices, cells, facets })
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_facets(&self) -> usize {
        self.facets.len()
    }

    /// `max_K h_K`.
    pub fn h(&self) -> f64 {
        self.cells.iter().map(|c| c.diameter).fold(0.0, f64::max)
    }

    /// Unit normal and tangent of a facet.
    pub fn facet_frame(&self, facet: usize) -> Result<([f64; 2], [f64; 2])> {
        let f = self.facets.get(facet).ok_or(Error::UnknownFacet(facet))?;
        Ok((f.normal, f.tangent))
    }

    /// Normal of `facet` pointing out of `cell`.
    pub fn outward_normal(&self, cell: usize, local: usize) -> [f64; 2] {
        let c = &self.cells[cell];
        let n = self.facets[c.facets[local]].normal;
        [c.facet_signs[local] * n[0], c.facet_signs[local] * n[1]]
    }

    pub fn centroid(&self, cell: usize) -> Point {
        cell_centroid(&self.vertices, &self.cells[cell])
    }

    /// Maps a reference point to physical coordinates.
    pub fn to_physical(&self, cell: usize, p: Point) -> Point {
        let c = &self.cells[cell];
        let v0 = self.vertices[c.vertices[0]];
        let j = &c.jacobian;
        [v0[0] + j[0][0] * p[0] + j[0][1] * p[1], v0[1] + j[1][0] * p[0] + j[1][1] * p[1]]
    }

    /// Maps a physical point to the reference coordinates of `cell`.
    pub fn to_reference(&self, cell: usize, x: Point) -> Point {
        let c = &self.cells[cell];
        let d = sub(x, self.vertices[c.vertices[0]]);
        let g = &c.inverse_jacobian;
        [g[0][0] * d[0] + g[0][1] * d[1], g[1][0] * d[0] + g[1][1] * d[1]]
    }

    /// Point on a facet at parameter `t` in `[0, 1]`.
    pub fn facet_point(&self, facet: usize, t: f64) -> Point {
        let f = &self.facets[facet];
        let a = self.vertices[f.vertices[0]];
        let b = self.vertices[f.vertices[1]];
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }

    pub fn facets_of_class(&self, class: FacetClass) -> impl Iterator<Item = usize> + '_ {
        self.facets.iter().enumerate().filter(move |(_, f)| f.class == class).map(|(i, _)| i)
    }

    pub fn count_class(&self, class: FacetClass) -> usize {
        self.facets_of_class(class).count()
    }

    pub fn count_subdomain(&self, sub: Subdomain) -> usize {
        self.cells.iter().filter(|c| c.subdomain == sub).count()
    }

    /// Legacy ASCII VTK unstructured grid with the subdomain tag per cell.
    pub fn to_vtk(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# vtk DataFile Version 3.0").unwrap();
        writeln!(s, "hdg mesh").unwrap();
        writeln!(s, "ASCII").unwrap();
        writeln!(s, "DATASET UNSTRUCTURED_GRID").unwrap();
        writeln!(s, "POINTS {} double", self.vertices.len()).unwrap();
        for v in &self.vertices {
            writeln!(s, "{:.17e} {:.17e} 0", v[0], v[1]).unwrap();
        }
        writeln!(s, "CELLS {} {}", self.cells.len(), 4 * self.cells.len()).unwrap();
        for c in &self.cells {
            writeln!(s, "3 {} {} {}", c.vertices[0], c.vertices[1], c.vertices[2]).unwrap();
        }
        writeln!(s, "CELL_TYPES {}", self.cells.len()).unwrap();
        for _ in &self.cells {
            writeln!(s, "5").unwrap();
        }
        writeln!(s, "CELL_DATA {}", self.cells.len()).unwrap();
        writeln!(s, "SCALARS subdomain int 1").unwrap();
        writeln!(s, "LOOKUP_TABLE default").unwrap();
        for c in &self.cells {
            writeln!(s, "{}", if c.subdomain == Subdomain::Stokes { 0 } else { 1 }).unwrap();
        }
        s
    }
}

fn cell_centroid(vertices: &[Point], cell: &Cell) -> Point {
    let [a, b, c] = cell.vertices.map(|v| vertices[v]);
    [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
}
