//! Compressed sparse row matrices built from triplets, plus a thin wrapper
//! around the sparse LU factorization.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl CsrMatrix {
    /// Duplicates are summed in input order, so the result depends only on
    /// the order of `triplets`.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                data.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self { nrows, ncols, indptr, indices, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let s = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[s.clone()], &self.data[s])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(i) => vals[i],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                t.push((c, r, v));
            }
        }
        Self::from_triplets(self.ncols, self.nrows, t)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// `max |A_ij - A_ji|`.
    pub fn symmetry_defect(&self) -> f64 {
        let mut d = 0.0f64;
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                d = d.max((v - self.get(c, r)).abs());
            }
        }
        d
    }

    /// Whether `(i, j)` stored implies `(j, i)` stored.
    pub fn pattern_is_symmetric(&self) -> bool {
        (0..self.nrows).all(|r| {
            let (cols, _) = self.row(r);
            cols.iter().all(|&c| self.row(c).0.binary_search(&r).is_ok())
        })
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let mut t = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                t.push(Triplet::new(r, c, v));
            }
        }
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &t)
            .map_err(|e| Error::SingularSystem(format!("could not build sparse matrix: {e:?}")))
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Row scaling `r` and column scaling `c` such that every row and column of
/// `diag(r) A diag(c)` has max-abs entry close to one.
fn equilibrate(a: &CsrMatrix) -> (Vec<f64>, Vec<f64>) {
    let mut r = vec![1.0; a.nrows];
    let mut c = vec![1.0; a.ncols];
    for _ in 0..4 {
        for (i, ri) in r.iter_mut().enumerate() {
            let (cols, vals) = a.row(i);
            let m = cols.iter().zip(vals).fold(0.0f64, |m, (&j, &v)| m.max((*ri * v * c[j]).abs()));
            if m > 0.0 {
                *ri /= m.sqrt();
            }
        }
        let mut cm = vec![0.0f64; a.ncols];
        for i in 0..a.nrows {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                cm[j] = cm[j].max((r[i] * v * c[j]).abs());
            }
        }
        for (cj, m) in c.iter_mut().zip(cm) {
            if m > 0.0 {
                *cj /= m.sqrt();
            }
        }
    }
    (r, c)
}

/// Equilibrated sparse LU factorization of a square matrix.
pub struct SparseLu {
    n: usize,
    rs: Vec<f64>,
    cs: Vec<f64>,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl SparseLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::DimensionMismatch { expected: a.nrows, got: a.ncols });
        }
        let n = a.nrows;
        let (rs, cs) = equilibrate(a);
        let mut scaled = a.clone();
        for i in 0..n {
            for idx in scaled.indptr[i]..scaled.indptr[i + 1] {
                scaled.data[idx] *= rs[i] * cs[scaled.indices[idx]];
            }
        }
        let fa = scaled.to_faer()?;
        // a sequential factorization keeps results independent of the
        // worker count
        faer::set_global_parallelism(faer::Par::Seq);
        // the factorization panics on exactly singular pivots
        let lu = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| fa.sp_lu()))
            .map_err(|_| Error::SingularSystem("zero pivot in sparse LU".into()))?
            .map_err(|e| Error::SingularSystem(format!("{e:?}")))?;
        Ok(Self { n, rs, cs, lu })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut x = Mat::<f64>::from_fn(self.n, 1, |i, _| self.rs[i] * b[i]);
        self.lu.solve_in_place(x.as_mut());
        (0..self.n).map(|i| self.cs[i] * x[(i, 0)]).collect()
    }
}

/// `b - A x` with each row accumulated in double-double arithmetic, so the
/// residual is accurate even when it is far below `eps |A| |x|`.
pub fn residual_compensated(a: &CsrMatrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    (0..a.nrows)
        .map(|i| {
            let (cols, vals) = a.row(i);
            let (mut hi, mut lo) = (b[i], 0.0);
            for (&j, &v) in cols.iter().zip(vals) {
                let p = v * x[j];
                let pe = v.mul_add(x[j], -p);
                // two-sum of hi and -p
                let s = hi - p;
                let bb = s - hi;
                let err = (hi - (s - bb)) + (-p - bb);
                hi = s;
                lo += err - pe;
            }
            hi + lo
        })
        .collect()
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Iterative refinement of `A x = b` with an approximate inverse `solve`
/// and compensated residuals. Stops when the correction reaches rounding
/// level or stops contracting. Returns the relative residual
/// `|Ax - b| / |b|` (absolute when `b = 0`).
pub fn refine(a: &CsrMatrix, b: &[f64], x: &mut [f64], steps: usize, solve: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<f64> {
    let mut prev = f64::INFINITY;
    let mut r = residual_compensated(a, b, x);
    for _ in 0..steps {
        let d = solve(&r)?;
        let dn = max_abs(&d);
        if !(dn < prev) {
            break;
        }
        for (xi, di) in x.iter_mut().zip(&d) {
            *xi += di;
        }
        r = residual_compensated(a, b, x);
        if dn <= 4.0 * f64::EPSILON * max_abs(x) || dn > 0.5 * prev {
            break;
        }
        prev = dn;
    }
    let bnorm = norm2(b);
    let rel = norm2(&r) / if bnorm > 0.0 { bnorm } else { 1.0 };
    if !rel.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("factorization produced non-finite values".into()));
    }
    Ok(rel)
}

/// Solves `A x = b` with an equilibrated sparse LU and up to six steps of
/// iterative refinement. Returns the solution and the relative residual.
pub fn sparse_solve(a: &CsrMatrix, b: &[f64]) -> Result<(Vec<f64>, f64)> {
    if a.nrows != a.ncols || b.len() != a.nrows {
        return Err(Error::DimensionMismatch { expected: a.nrows, got: b.len() });
    }
    if a.nrows == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let lu = SparseLu::factor(a)?;
    let mut x = lu.solve(b);
    let rel = refine(a, b, &mut x, 6, |r| Ok(lu.solve(r)))?;
    Ok((x, rel))
}
