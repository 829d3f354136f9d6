//! Global assembly, linear solves (optionally statically condensed onto the
//! facet unknowns) and the Picard iteration for the convective term.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::analysis::velocity_triple_norm;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::fespace::{project_facet, DiscreteField, FacetSpace, SpaceLayout};
use crate::forms::{FormContext, LocalKernel, ProblemData};
use crate::mesh::{FacetClass, Mesh, Subdomain};
use crate::sparse::{norm2, refine, CsrMatrix, SparseLu};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialGuess {
    Zero,
    StokesDarcy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PressureConstraint {
    /// Zero-mean pressure through a Lagrange multiplier.
    Multiplier,
    /// Pressure prescribed on part of the porous boundary.
    PressureBc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams {
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub condense: bool,
    pub initial_guess: InitialGuess,
    pub constraint: PressureConstraint,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            picard_tol: 1e-10,
            picard_max_iter: 50,
            condense: true,
            initial_guess: InitialGuess::StokesDarcy,
            constraint: PressureConstraint::Multiplier,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.picard_tol > 0.0) {
            return Err(Error::InvalidData(format!("picard_tol must be positive, got {}", self.picard_tol)));
        }
        if self.picard_max_iter == 0 {
            return Err(Error::InvalidData("picard_max_iter must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_multiplier(&self) -> bool {
        self.constraint == PressureConstraint::Multiplier
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Linear solves counted towards the iteration (the Stokes-Darcy
    /// initial guess is not counted).
    pub iterations: usize,
    /// `|||u^m - u^{m-1}|||_v` per iteration.
    pub increments: Vec<f64>,
    /// Increments relative to `|||u^m|||_v`.
    pub relative_increments: Vec<f64>,
    pub converged: bool,
    /// Relative residual of the last linear solve.
    pub residual: f64,
    pub wall_time: f64,
}

/// Square system over the free dofs. Free dofs keep their relative order,
/// so all cell dofs come first and each cell block stays contiguous.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub layout: Arc<SpaceLayout>,
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// Free index of each dof, `None` for prescribed dofs.
    pub free_index: Vec<Option<usize>>,
    pub free_dofs: Vec<usize>,
    /// Prescribed values (zero on free dofs).
    pub fixed_values: Vec<f64>,
    pub source_shift: f64,
}

impl LinearSystem {
    pub fn num_free(&self) -> usize {
        self.free_dofs.len()
    }

    /// Expand a free-dof solution to a full field.
    pub fn expand(&self, x: &[f64]) -> DiscreteField {
        let mut values = self.fixed_values.clone();
        for (i, &d) in self.free_dofs.iter().enumerate() {
            values[d] = x[i];
        }
        DiscreteField { layout: self.layout.clone(), values, source_shift: self.source_shift }
    }

    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let ax = self.matrix.matvec(x);
        let r: Vec<f64> = ax.iter().zip(&self.rhs).map(|(a, b)| b - a).collect();
        let b = norm2(&self.rhs);
        norm2(&r) / if b > 0.0 { b } else { 1.0 }
    }
}

struct Scatter {
    triplets: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
}

impl Scatter {
    fn add(&mut self, sys: &LinearSystem, k: &LocalKernel, transpose_too: bool) {
        for (i, &r) in k.rows.iter().enumerate() {
            let Some(ri) = sys.free_index[r] else { continue };
            self.rhs[ri] += k.vector[i];
            for (j, &c) in k.cols.iter().enumerate() {
                let v = k.matrix[(i, j)];
                match sys.free_index[c] {
                    Some(ci) => self.triplets.push((ri, ci, v)),
                    None => self.rhs[ri] -= v * sys.fixed_values[c],
                }
            }
        }
        if transpose_too {
            for (j, &c) in k.cols.iter().enumerate() {
                let Some(ci) = sys.free_index[c] else { continue };
                for (i, &r) in k.rows.iter().enumerate() {
                    let v = k.matrix[(i, j)];
                    match sys.free_index[r] {
                        Some(ri) => self.triplets.push((ci, ri, v)),
                        None => self.rhs[ci] -= v * sys.fixed_values[r],
                    }
                }
            }
        }
    }
}

fn check_constraint(mesh: &Mesh, layout: &SpaceLayout, data: &ProblemData) -> Result<()> {
    let has_pressure = (0..mesh.num_facets()).any(|f| data.is_pressure_facet(mesh, f));
    match (layout.multiplier().is_some(), has_pressure) {
        (true, true) => Err(Error::ConstraintConflict(
            "mean-pressure multiplier and pressure boundary data are both active".into(),
        )),
        (false, false) => Err(Error::ConstraintConflict(
            "no pressure constraint: enable the multiplier or prescribe pressure on a porous boundary side".into(),
        )),
        _ => Ok(()),
    }
}

/// Assembles the (Oseen-linearised when `w` is given) system. Prescribed
/// facet velocities on the free-flow boundary and facet pressures on
/// pressure facets are eliminated symmetrically.
pub fn assemble_global(
    mesh: &Mesh,
    layout: &Arc<SpaceLayout>,
    el: &Element,
    data: &ProblemData,
    w: Option<&DiscreteField>,
) -> Result<LinearSystem> {
    data.validate()?;
    check_constraint(mesh, layout, data)?;
    if let Some(w) = w {
        if w.values.len() != layout.total() {
            return Err(Error::DimensionMismatch { expected: layout.total(), got: w.values.len() });
        }
    }
    let total = layout.total();
    let qd = el.cell_rule.degree;
    let nt = el.n_trace();

    let mut fixed = vec![false; total];
    let mut fixed_values = vec![0.0; total];
    let g_u = project_facet(mesh, FacetSpace::Velocity, el.k, qd, |_, x| (data.g_u)(x).to_vec());
    let g_p = project_facet(mesh, FacetSpace::PressureD, el.k, qd, |_, x| vec![(data.g_p)(x)]);
    for f in 0..mesh.num_facets() {
        if mesh.facets[f].class == FacetClass::ExteriorS {
            for (d, &v) in layout.facet_velocity(f).unwrap().zip(g_u.block(f)) {
                fixed[d] = true;
                fixed_values[d] = v;
            }
        } else if data.is_pressure_facet(mesh, f) {
            for (d, &v) in layout.facet_pressure_d(f).unwrap().zip(g_p.block(f)) {
                fixed[d] = true;
                fixed_values[d] = v;
            }
        }
    }
    let mut free_index = vec![None; total];
    let mut free_dofs = Vec::with_capacity(total);
    for d in 0..total {
        if !fixed[d] {
            free_index[d] = Some(free_dofs.len());
            free_dofs.push(d);
        }
    }

    let ctx = FormContext::new(mesh, layout, el, data);

    // With a multiplier the discrete problem is solvable only if the total
    // discrete inflow vanishes; shift the porous source by the quadrature
    // defect so that it does.
    let source_shift = if layout.multiplier().is_some() {
        let mut defect = 0.0;
        let mut area_d = 0.0;
        for (c, cell) in mesh.cells.iter().enumerate() {
            if cell.subdomain == Subdomain::Darcy {
                area_d += cell.area();
                defect += el.cell_qps(mesh, c).iter().map(|q| q.w * (data.f_d)(q.x)).sum::<f64>();
            }
        }
        for (f, facet) in mesh.facets.iter().enumerate() {
            match facet.class {
                FacetClass::ExteriorS => {
                    let b = g_u.block(f);
                    defect += facet.length * (b[0] * facet.normal[0] + b[nt] * facet.normal[1]);
                }
                FacetClass::ExteriorD => {
                    defect += el.trace_qps(mesh, f).iter().map(|q| q.w * (data.g_n)(q.x, facet.normal)).sum::<f64>();
                }
                _ => {}
            }
        }
        defect / area_d
    } else {
        0.0
    };

    let mut sys = LinearSystem {
        layout: layout.clone(),
        matrix: CsrMatrix::identity(0),
        rhs: Vec::new(),
        free_index,
        free_dofs,
        fixed_values,
        source_shift,
    };

    // (kernel, scatter transposed as well)
    let cell_kernels: Vec<Result<Vec<(LocalKernel, bool)>>> = (0..mesh.num_cells())
        .into_par_iter()
        .map(|c| {
            let mut out = Vec::with_capacity(4);
            match mesh.cells[c].subdomain {
                Subdomain::Stokes => {
                    let mut a = ctx.local_ahs(c);
                    if let Some(w) = w {
                        a.matrix += ctx.local_th(c, w.cell_velocity(c)).matrix;
                    }
                    out.push((a, false));
                }
                Subdomain::Darcy => out.push((ctx.local_ad(c)?, false)),
            }
            out.push((ctx.local_bh(c), true));
            out.push((ctx.local_rhs(c, source_shift), false));
            if layout.multiplier().is_some() {
                out.push((ctx.local_mean(c), true));
            }
            Ok(out)
        })
        .collect();
    let facet_kernels: Vec<Vec<(LocalKernel, bool)>> = (0..mesh.num_facets())
        .into_par_iter()
        .map(|f| {
            let mut out = Vec::new();
            match mesh.facets[f].class {
                FacetClass::Interface => {
                    out.push((ctx.local_ai(f), false));
                    out.push((ctx.local_bhi(f, Subdomain::Stokes), true));
                    out.push((ctx.local_bhi(f, Subdomain::Darcy), true));
                }
                FacetClass::ExteriorS => out.push((ctx.local_bhi(f, Subdomain::Stokes), true)),
                _ => {}
            }
            if let Some(k) = ctx.bc_contributions(f) {
                out.push((k, false));
            }
            out
        })
        .collect();

    let n = sys.num_free();
    let mut sc = Scatter { triplets: Vec::new(), rhs: vec![0.0; n] };
    for ks in cell_kernels {
        for (k, t) in ks? {
            sc.add(&sys, &k, t);
        }
    }
    for ks in facet_kernels {
        for (k, t) in ks {
            sc.add(&sys, &k, t);
        }
    }
    sys.matrix = CsrMatrix::from_triplets(n, n, sc.triplets);
    sys.rhs = sc.rhs;
    Ok(sys)
}

/// Direct solve of the full free-dof system.
pub fn solve_linear(sys: &LinearSystem) -> Result<(DiscreteField, f64)> {
    let inner = SkeletonSolver::factor(&sys.matrix, sys.layout.multiplier().is_some().then(|| constant_pressure_mode(sys, 0)))?;
    let mut x = inner.solve(&sys.rhs)?;
    let res = refine(&sys.matrix, &sys.rhs, &mut x, 6, |r| inner.solve(r))?;
    Ok((sys.expand(&x), res))
}

/// Per-cell elimination data.
struct CellElimination {
    /// Free indices of the cell block.
    interior: std::ops::Range<usize>,
    /// Skeleton free indices coupled to the block.
    skeleton: Vec<usize>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    /// `A_SI` restricted to the cell's skeleton rows.
    a_si: DMatrix<f64>,
    /// `A_II^{-1} A_IS`
    x_s: DMatrix<f64>,
    /// `A_II^{-1} b_I`
    x_b: DVector<f64>,
}

/// System reduced onto the skeleton (facet dofs and multiplier).
pub struct CondensedSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// Free index of the first skeleton dof.
    pub offset: usize,
    cells: Vec<CellElimination>,
}

impl CondensedSystem {
    pub fn num_skeleton(&self) -> usize {
        self.rhs.len()
    }

    /// Skeleton right-hand side `b_S - A_SI A_II^{-1} b_I` for a full
    /// free-dof vector `b`.
    fn reduce_rhs(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut rhs = b[self.offset..].to_vec();
        for (c, ce) in self.cells.iter().enumerate() {
            let b_i = DVector::from_column_slice(&b[ce.interior.clone()]);
            let y = ce.lu.solve(&b_i).ok_or(Error::SingularLocalBlock { cell: c })?;
            let load = &ce.a_si * y;
            for (ls, &s) in ce.skeleton.iter().enumerate() {
                rhs[s - self.offset] -= load[ls];
            }
        }
        Ok(rhs)
    }

    /// Interior unknowns from `b` and the skeleton solution.
    fn recover(&self, b: &[f64], skeleton: &[f64]) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.offset + skeleton.len()];
        x[self.offset..].copy_from_slice(skeleton);
        for (c, ce) in self.cells.iter().enumerate() {
            let b_i = DVector::from_column_slice(&b[ce.interior.clone()]);
            let y = ce.lu.solve(&b_i).ok_or(Error::SingularLocalBlock { cell: c })?;
            let xs = DVector::from_iterator(ce.skeleton.len(), ce.skeleton.iter().map(|&s| skeleton[s - self.offset]));
            let xi = y - &ce.x_s * xs;
            x[ce.interior.clone()].copy_from_slice(xi.as_slice());
        }
        Ok(x)
    }
}

/// Eliminates the cell-interior unknowns cell by cell.
pub fn static_condense(sys: &LinearSystem) -> Result<CondensedSystem> {
    let layout = &sys.layout;
    let offset = layout.num_cell_dofs();
    debug_assert!(sys.free_dofs[..offset].iter().enumerate().all(|(i, &d)| i == d));
    let a = &sys.matrix;
    let n = sys.num_free();
    let m = n - offset;

    let cells: Vec<Result<CellElimination>> = (0..layout.num_cells())
        .into_par_iter()
        .map(|c| {
            let interior = layout.cell_block(c);
            let ni = interior.len();
            let mut skeleton: Vec<usize> = Vec::new();
            let mut a_ii = DMatrix::zeros(ni, ni);
            for (li, r) in interior.clone().enumerate() {
                let (cols, vals) = a.row(r);
                for (&cc, &v) in cols.iter().zip(vals) {
                    if interior.contains(&cc) {
                        a_ii[(li, cc - interior.start)] = v;
                    } else {
                        debug_assert!(cc >= offset, "cell blocks must not couple directly");
                        skeleton.push(cc);
                    }
                }
            }
            skeleton.sort_unstable();
            skeleton.dedup();
            let ns = skeleton.len();
            let mut a_is = DMatrix::zeros(ni, ns);
            let mut a_si = DMatrix::zeros(ns, ni);
            for (li, r) in interior.clone().enumerate() {
                for (ls, &s) in skeleton.iter().enumerate() {
                    a_is[(li, ls)] = a.get(r, s);
                    a_si[(ls, li)] = a.get(s, r);
                }
            }
            let b_i = DVector::from_iterator(ni, interior.clone().map(|r| sys.rhs[r]));
            let lu = a_ii.lu();
            let x_s = lu.solve(&a_is).ok_or(Error::SingularLocalBlock { cell: c })?;
            let x_b = lu.solve(&b_i).ok_or(Error::SingularLocalBlock { cell: c })?;
            if x_s.iter().chain(x_b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::SingularLocalBlock { cell: c });
            }
            Ok(CellElimination { interior, skeleton, lu, a_si, x_s, x_b })
        })
        .collect();
    let cells: Vec<CellElimination> = cells.into_iter().collect::<Result<_>>()?;

    let mut triplets = Vec::new();
    let mut rhs: Vec<f64> = sys.rhs[offset..].to_vec();
    for r in offset..n {
        let (cols, vals) = a.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            if c >= offset {
                triplets.push((r - offset, c - offset, v));
            }
        }
    }
    for ce in &cells {
        let schur = &ce.a_si * &ce.x_s;
        let load = &ce.a_si * &ce.x_b;
        for (ls, &s) in ce.skeleton.iter().enumerate() {
            rhs[s - offset] -= load[ls];
            for (lt, &t) in ce.skeleton.iter().enumerate() {
                triplets.push((s - offset, t - offset, -schur[(ls, lt)]));
            }
        }
    }
    Ok(CondensedSystem { matrix: CsrMatrix::from_triplets(m, m, triplets), rhs, offset, cells })
}

/// Recovers the full free-dof vector from a skeleton solution.
pub fn recover_interior(cs: &CondensedSystem, skeleton: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; cs.offset + skeleton.len()];
    x[cs.offset..].copy_from_slice(skeleton);
    for ce in &cs.cells {
        let xs = DVector::from_iterator(ce.skeleton.len(), ce.skeleton.iter().map(|&s| skeleton[s - cs.offset]));
        let xi = &ce.x_b - &ce.x_s * xs;
        x[ce.interior.clone()].copy_from_slice(xi.as_slice());
    }
    x
}

/// Solves through static condensation, refined against the full system.
/// The returned residual is that of the full system.
pub fn solve_condensed(sys: &LinearSystem) -> Result<(DiscreteField, f64)> {
    let cs = static_condense(sys)?;
    let inner = SkeletonSolver::factor(
        &cs.matrix,
        sys.layout.multiplier().is_some().then(|| constant_pressure_mode(sys, cs.offset)),
    )?;
    let mut x = recover_interior(&cs, &inner.solve(&cs.rhs)?);
    let res = refine(&sys.matrix, &sys.rhs, &mut x, 6, |r| cs.recover(r, &inner.solve(&cs.reduce_rhs(r)?)?))?;
    Ok((sys.expand(&x), res))
}

/// Coefficient vector of the constant pressure `1` restricted to the free
/// indices `>= offset` (cell pressures carry `1 / sqrt 2` on the constant
/// basis function, facet pressures `1` on the lowest Legendre mode).
fn constant_pressure_mode(sys: &LinearSystem, offset: usize) -> Vec<f64> {
    let layout = &sys.layout;
    let m = sys.num_free() - offset;
    let mut n0 = vec![0.0; m];
    let mut mark = |dof: usize, v: f64| {
        if let Some(i) = sys.free_index[dof] {
            if i >= offset {
                n0[i - offset] = v;
            }
        }
    };
    for c in 0..layout.num_cells() {
        mark(layout.cell_pressure(c).start, std::f64::consts::FRAC_1_SQRT_2);
    }
    for f in 0..layout.num_facets() {
        for r in [layout.facet_pressure_s(f), layout.facet_pressure_d(f)].into_iter().flatten() {
            mark(r.start, 1.0);
        }
    }
    n0
}

/// Factorized solver for either a plain system or one bordered by the
/// mean-pressure multiplier (last unknown).
enum SkeletonSolver {
    Plain(SparseLu),
    Bordered(Bordered),
}

/// `[A c; r^T 0] (y, lambda) = (b, d)`, solved without factorizing the
/// dense border.
///
/// The constant pressure `n0` spans the left and right kernels of `A`, so
/// `lambda = n0.b / n0.c`; `y` is then found from `A` with one pressure
/// coefficient pinned and corrected along `n0` to satisfy the last row.
struct Bordered {
    lu: SparseLu,
    pin: usize,
    c: Vec<f64>,
    r: Vec<f64>,
    n0: Vec<f64>,
    n0c: f64,
    rn0: f64,
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

impl SkeletonSolver {
    fn factor(a: &CsrMatrix, n0: Option<Vec<f64>>) -> Result<Self> {
        let Some(mut n0) = n0 else {
            return Ok(Self::Plain(SparseLu::factor(a)?));
        };
        let lam = a.nrows - 1;
        assert_eq!(n0.len(), a.nrows);
        n0.truncate(lam);
        let pin = n0.iter().position(|&v| v != 0.0).ok_or_else(|| {
            Error::SingularSystem("no free pressure to carry the mean-pressure constraint".into())
        })?;
        let mut c = vec![0.0; lam];
        let mut triplets = Vec::with_capacity(a.nnz());
        for i in 0..lam {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if j == lam {
                    c[i] = v;
                } else if i != pin && j != pin {
                    triplets.push((i, j, v));
                }
            }
        }
        triplets.push((pin, pin, 1.0));
        let (rc, rv) = a.row(lam);
        let mut r = vec![0.0; lam];
        for (&j, &v) in rc.iter().zip(rv) {
            if j < lam {
                r[j] = v;
            }
        }
        let n0c = dot(&n0, &c);
        let rn0 = dot(&r, &n0);
        if n0c == 0.0 || rn0 == 0.0 {
            return Err(Error::SingularSystem("mean-pressure constraint does not see the constant pressure".into()));
        }
        let lu = SparseLu::factor(&CsrMatrix::from_triplets(lam, lam, triplets))?;
        Ok(Self::Bordered(Bordered { lu, pin, c, r, n0, n0c, rn0 }))
    }

    fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let x = match self {
            Self::Plain(lu) => lu.solve(rhs),
            Self::Bordered(bd) => {
                let lam = bd.c.len();
                let b = &rhs[..lam];
                let lambda = dot(&bd.n0, b) / bd.n0c;
                let mut rhs_p: Vec<f64> = b.iter().zip(&bd.c).map(|(bi, ci)| bi - ci * lambda).collect();
                rhs_p[bd.pin] = 0.0;
                let mut y = bd.lu.solve(&rhs_p);
                let s = (rhs[lam] - dot(&bd.r, &y)) / bd.rn0;
                for (yi, ni) in y.iter_mut().zip(&bd.n0) {
                    *yi += s * ni;
                }
                y.push(lambda);
                y
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem("factorization produced non-finite values".into()));
        }
        Ok(x)
    }
}

fn linear_solve(
    mesh: &Mesh,
    layout: &Arc<SpaceLayout>,
    el: &Element,
    data: &ProblemData,
    w: Option<&DiscreteField>,
    condense: bool,
) -> Result<(DiscreteField, f64)> {
    let sys = assemble_global(mesh, layout, el, data, w)?;
    if condense {
        solve_condensed(&sys)
    } else {
        solve_linear(&sys)
    }
}

/// Picard iteration: each step solves the Oseen problem linearised at the
/// previous velocity. Without convection this is a single linear solve.
pub fn picard_solve(
    mesh: &Mesh,
    layout: &Arc<SpaceLayout>,
    el: &Element,
    data: &ProblemData,
    params: &SolverParams,
) -> Result<(DiscreteField, SolveReport)> {
    params.validate()?;
    if params.with_multiplier() != layout.multiplier().is_some() {
        return Err(Error::ConstraintConflict("solver constraint mode does not match the dof layout".into()));
    }
    let start = Instant::now();
    let wrap = |iteration: usize| move |e: Error| Error::PicardLinearSolve { iteration, source: Box::new(e) };
    let mut report = SolveReport {
        iterations: 0,
        increments: Vec::new(),
        relative_increments: Vec::new(),
        converged: false,
        residual: 0.0,
        wall_time: 0.0,
    };

    let mut prev = if !data.convection || params.initial_guess == InitialGuess::Zero {
        DiscreteField::zeros(layout.clone())
    } else {
        let (x, res) = linear_solve(mesh, layout, el, data, None, params.condense).map_err(wrap(0))?;
        report.residual = res;
        x
    };
    let max_iter = if data.convection { params.picard_max_iter } else { 1 };
    for it in 1..=max_iter {
        let w = if data.convection { Some(&prev) } else { None };
        let (x, res) = linear_solve(mesh, layout, el, data, w, params.condense).map_err(wrap(it))?;
        report.residual = res;
        report.iterations = it;
        let diff: Vec<f64> = x.values.iter().zip(&prev.values).map(|(a, b)| a - b).collect();
        let inc = velocity_triple_norm(mesh, el, layout, &diff).total();
        let norm = velocity_triple_norm(mesh, el, layout, &x.values).total();
        let rel = if norm > 0.0 { inc / norm } else { 0.0 };
        report.increments.push(inc);
        report.relative_increments.push(rel);
        prev = x;
        if !data.convection || inc == 0.0 || rel <= params.picard_tol {
            report.converged = true;
            break;
        }
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((prev, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::Permeability;
    use crate::mesh::{build_structured_mesh, DomainSpec};

    fn setup(k: usize, n: usize) -> (Mesh, Arc<SpaceLayout>, Element) {
        let mesh = build_structured_mesh(&DomainSpec::new([0.0, 1.0], [-1.0, 1.0], 0.0).unwrap(), n).unwrap();
        let layout = Arc::new(SpaceLayout::new(&mesh, k, true));
        (mesh, layout, Element::with_default_rule(k))
    }

    fn data() -> ProblemData {
        ProblemData::homogeneous(1.0, 1.0, 8.0, Permeability::constant(1.0))
    }

    #[test]
    fn zero_data_gives_zero_rhs_and_solution() {
        let (mesh, layout, el) = setup(1, 2);
        let sys = assemble_global(&mesh, &layout, &el, &data(), None).unwrap();
        assert!(sys.rhs.iter().all(|&v| v == 0.0));
        let (u, _) = solve_linear(&sys).unwrap();
        assert!(u.values.iter().all(|v| v.abs() < 1e-300));
    }

    #[test]
    fn linear_system_is_symmetric_without_convection() {
        let (mesh, layout, el) = setup(2, 2);
        let sys = assemble_global(&mesh, &layout, &el, &data(), None).unwrap();
        assert!(sys.matrix.pattern_is_symmetric());
        assert!(sys.matrix.symmetry_defect() <= 1e-12 * sys.matrix.max_abs());
    }

    #[test]
    fn free_system_size() {
        let (mesh, layout, el) = setup(1, 2);
        let sys = assemble_global(&mesh, &layout, &el, &data(), None).unwrap();
        let exterior_s = mesh.count_class(FacetClass::ExteriorS);
        assert_eq!(sys.num_free(), layout.total() - exterior_s * 2 * el.n_trace());
    }

    #[test]
    fn constraint_conflicts_are_rejected() {
        let (mesh, layout, el) = setup(1, 2);
        let mut d = data();
        d.pressure_sides = vec![crate::mesh::BoundarySide::Bottom];
        assert!(matches!(assemble_global(&mesh, &layout, &el, &d, None), Err(Error::ConstraintConflict(_))));
        let bare = Arc::new(SpaceLayout::new(&mesh, 1, false));
        assert!(matches!(assemble_global(&mesh, &bare, &el, &data(), None), Err(Error::ConstraintConflict(_))));
    }

    #[test]
    fn wind_of_wrong_size_is_rejected() {
        let (mesh, layout, el) = setup(1, 2);
        let (_, other, _) = setup(2, 2);
        let w = DiscreteField::zeros(other);
        assert!(matches!(
            assemble_global(&mesh, &layout, &el, &data(), Some(&w)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn scatter_matches_sum_of_local_oracles() {
        // free index -> dense global matrix rebuilt from the kernels directly
        let (mesh, layout, el) = setup(1, 1);
        let d = data();
        let sys = assemble_global(&mesh, &layout, &el, &d, None).unwrap();
        let ctx = FormContext::new(&mesh, &layout, &el, &d);
        let n = layout.total();
        let mut dense = DMatrix::<f64>::zeros(n, n);
        let mut add = |k: &LocalKernel, t: bool| {
            for (i, &r) in k.rows.iter().enumerate() {
                for (j, &c) in k.cols.iter().enumerate() {
                    dense[(r, c)] += k.matrix[(i, j)];
                    if t {
                        dense[(c, r)] += k.matrix[(i, j)];
                    }
                }
            }
        };
        for c in 0..mesh.num_cells() {
            match mesh.cells[c].subdomain {
                Subdomain::Stokes => add(&ctx.local_ahs(c), false),
                Subdomain::Darcy => add(&ctx.local_ad(c).unwrap(), false),
            }
            add(&ctx.local_bh(c), true);
            add(&ctx.local_mean(c), true);
        }
        for f in 0..mesh.num_facets() {
            match mesh.facets[f].class {
                FacetClass::Interface => {
                    add(&ctx.local_ai(f), false);
                    add(&ctx.local_bhi(f, Subdomain::Stokes), true);
                    add(&ctx.local_bhi(f, Subdomain::Darcy), true);
                }
                FacetClass::ExteriorS => add(&ctx.local_bhi(f, Subdomain::Stokes), true),
                _ => {}
            }
        }
        for (i, &r) in sys.free_dofs.iter().enumerate() {
            for (j, &c) in sys.free_dofs.iter().enumerate() {
                assert!((sys.matrix.get(i, j) - dense[(r, c)]).abs() < 1e-13, "({r},{c})");
            }
        }
    }

    #[test]
    fn condensed_solve_matches_full_solve() {
        let (mesh, layout, el) = setup(2, 2);
        let mut d = data();
        d.f_s = Arc::new(|x| [x[1].sin(), x[0] * x[1]]);
        d.f_d = Arc::new(|x| x[0] - 0.5);
        d.g_u = Arc::new(|x| [1.0 + x[1], 0.0]);
        let sys = assemble_global(&mesh, &layout, &el, &d, None).unwrap();
        let (full, r1) = solve_linear(&sys).unwrap();
        let cs = static_condense(&sys).unwrap();
        assert_eq!(cs.num_skeleton(), sys.num_free() - layout.num_cell_dofs());
        let (cond, r2) = solve_condensed(&sys).unwrap();
        assert!(r1 <= 1e-10 && r2 <= 1e-10, "{r1} {r2}");
        let diff = full.values.iter().zip(&cond.values).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(diff <= 1e-8, "{diff}");
    }

    #[test]
    fn convection_off_is_one_iteration_and_zero_data_gives_zero() {
        let (mesh, layout, el) = setup(1, 2);
        let (u, rep) = picard_solve(&mesh, &layout, &el, &data(), &SolverParams::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert!(u.values.iter().all(|&v| v == 0.0));
        let mut d = data();
        d.convection = true;
        let (u, rep) = picard_solve(&mesh, &layout, &el, &d, &SolverParams::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(u.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn assembly_is_deterministic() {
        let (mesh, layout, el) = setup(2, 2);
        let mut d = data();
        d.f_s = Arc::new(|x| [x[0].exp(), x[1].cos()]);
        let a = assemble_global(&mesh, &layout, &el, &d, None).unwrap();
        let b = assemble_global(&mesh, &layout, &el, &d, None).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.rhs, b.rhs);
    }
}
