//! Polynomial bases and quadrature on the reference triangle
//! `{x, y >= 0, x + y <= 1}` and the reference segment `[0, 1]`.

use crate::error::{Error, Result};

/// Highest polynomial degree the quadrature generators accept.
pub const MAX_QUAD_DEGREE: usize = 60;

/// A quadrature rule with points of type `P` (a scalar on segments,
/// a coordinate pair on triangles).
#[derive(Debug, Clone)]
pub struct QuadratureRule<P> {
    pub points: Vec<P>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl<P: Copy> QuadratureRule<P> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (P, f64)> + '_ {
        self.points.iter().copied().zip(self.weights.iter().copied())
    }
}

pub type SegmentRule = QuadratureRule<f64>;
pub type TriangleRule = QuadratureRule<[f64; 2]>;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre_symmetric(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, refined by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss rule on `[0, 1]` exact for polynomials of the given degree.
pub fn quad_segment(degree: usize) -> Result<SegmentRule> {
    if degree > MAX_QUAD_DEGREE {
        return Err(Error::UnsupportedQuadrature { degree, max: MAX_QUAD_DEGREE });
    }
    let n = degree / 2 + 1;
    let (x, w) = gauss_legendre_symmetric(n);
    Ok(QuadratureRule {
        points: x.iter().map(|t| 0.5 * (t + 1.0)).collect(),
        weights: w.iter().map(|w| 0.5 * w).collect(),
        degree,
    })
}

/// Collapsed (Duffy) product rule on the reference triangle.
///
/// The map `(s, t) -> (s, t (1 - s))` carries a Jacobian `1 - s`, so the
/// `s` direction needs one extra degree of exactness.
pub fn quad_triangle(degree: usize) -> Result<TriangleRule> {
    if degree > MAX_QUAD_DEGREE {
        return Err(Error::UnsupportedQuadrature { degree, max: MAX_QUAD_DEGREE });
    }
    let outer = quad_segment(degree + 1)?;
    let inner = quad_segment(degree)?;
    let mut points = Vec::with_capacity(outer.len() * inner.len());
    let mut weights = Vec::with_capacity(outer.len() * inner.len());
    for (s, ws) in outer.iter() {
        for (t, wt) in inner.iter() {
            points.push([s, t * (1.0 - s)]);
            weights.push(ws * wt * (1.0 - s));
        }
    }
    Ok(QuadratureRule { points, weights, degree })
}

/// Number of polynomials of total degree `<= k` in two variables.
pub fn dim_triangle(k: usize) -> usize {
    (k + 1) * (k + 2) / 2
}

/// Exponents `(a, b)` of the monomials `x^a y^b`, ordered by total degree.
fn monomial_exponents(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(dim_triangle(k));
    for total in 0..=k {
        for b in 0..=total {
            out.push((total - b, b));
        }
    }
    out
}

/// Values and gradients of a basis at one point.
#[derive(Debug, Clone)]
pub struct BasisEval {
    pub values: Vec<f64>,
    pub gradients: Vec<[f64; 2]>,
}

/// Orthonormal basis of `P_k` on the reference triangle.
///
/// Built by modified Gram-Schmidt on the monomials, ordered by total
/// degree, so the first `dim_triangle(j)` functions span `P_j` for
/// every `j <= k`. Function 0 is the constant `sqrt(2)`.
#[derive(Debug, Clone)]
pub struct TriangleBasis {
    degree: usize,
    exponents: Vec<(usize, usize)>,
    // row i holds the monomial coefficients of basis function i
    coeffs: Vec<Vec<f64>>,
}

impl TriangleBasis {
    pub fn new(degree: usize) -> Self {
        let exponents = monomial_exponents(degree);
        let n = exponents.len();
        let rule = quad_triangle(2 * degree + 2).expect("degree within table");
        // Monomial values at quadrature points.
        let mono: Vec<Vec<f64>> = rule
            .points
            .iter()
            .map(|p| exponents.iter().map(|&(a, b)| p[0].powi(a as i32) * p[1].powi(b as i32)).collect())
            .collect();
        let inner = |c1: &[f64], c2: &[f64]| -> f64 {
            let mut s = 0.0;
            for (m, w) in mono.iter().zip(&rule.weights) {
                let v1: f64 = c1.iter().zip(m).map(|(c, v)| c * v).sum();
                let v2: f64 = c2.iter().zip(m).map(|(c, v)| c * v).sum();
                s += w * v1 * v2;
            }
            s
        };
        let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut c = vec![0.0; n];
            c[i] = 1.0;
            // two passes for numerical orthogonality
            for _ in 0..2 {
                for q in &coeffs {
                    let proj = inner(&c, q);
                    for (cj, qj) in c.iter_mut().zip(q) {
                        *cj -= proj * qj;
                    }
                }
            }
            let norm = inner(&c, &c).sqrt();
            c.iter_mut().for_each(|v| *v /= norm);
            coeffs.push(c);
        }
        Self { degree, exponents, coeffs }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    /// Values of all basis functions at a reference point.
    pub fn values(&self, p: [f64; 2]) -> Vec<f64> {
        let mono = self.monomials(p);
        self.coeffs.iter().map(|c| c.iter().zip(&mono).map(|(a, b)| a * b).sum()).collect()
    }

    /// Values and reference gradients of all basis functions.
    pub fn eval(&self, p: [f64; 2]) -> BasisEval {
        let mono = self.monomials(p);
        let (dx, dy) = self.monomial_gradients(p);
        let mut values = Vec::with_capacity(self.dim());
        let mut gradients = Vec::with_capacity(self.dim());
        for c in &self.coeffs {
            let mut v = 0.0;
            let mut g = [0.0; 2];
            for j in 0..c.len() {
                v += c[j] * mono[j];
                g[0] += c[j] * dx[j];
                g[1] += c[j] * dy[j];
            }
            values.push(v);
            gradients.push(g);
        }
        BasisEval { values, gradients }
    }

    fn monomials(&self, p: [f64; 2]) -> Vec<f64> {
        self.exponents.iter().map(|&(a, b)| p[0].powi(a as i32) * p[1].powi(b as i32)).collect()
    }

    fn monomial_gradients(&self, p: [f64; 2]) -> (Vec<f64>, Vec<f64>) {
        let pw = |x: f64, e: usize| if e == 0 { 0.0 } else { e as f64 * x.powi(e as i32 - 1) };
        let dx = self.exponents.iter().map(|&(a, b)| pw(p[0], a) * p[1].powi(b as i32)).collect();
        let dy = self.exponents.iter().map(|&(a, b)| p[0].powi(a as i32) * pw(p[1], b)).collect();
        (dx, dy)
    }
}

/// Orthonormal shifted Legendre basis of `P_k` on `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct SegmentBasis {
    degree: usize,
}

impl SegmentBasis {
    pub fn new(degree: usize) -> Self {
        Self { degree }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn dim(&self) -> usize {
        self.degree + 1
    }

    pub fn values(&self, t: f64) -> Vec<f64> {
        let x = 2.0 * t - 1.0;
        let mut out = Vec::with_capacity(self.dim());
        let (mut p0, mut p1) = (1.0, x);
        for j in 0..=self.degree {
            let p = match j {
                0 => 1.0,
                1 => x,
                _ => {
                    let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                    p0 = p1;
                    p1 = p2;
                    p2
                }
            };
            out.push(((2 * j + 1) as f64).sqrt() * p);
        }
        out
    }
}

/// Which reference basis to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    TrianglePk,
    SegmentPk,
}

/// Evaluates a degree-`k` basis at each point. Segment points use the
/// first coordinate only; segment gradients are reported as zero-length.
pub fn eval_basis(kind: BasisKind, k: usize, points: &[[f64; 2]]) -> Vec<BasisEval> {
    match kind {
        BasisKind::TrianglePk => {
            let basis = TriangleBasis::new(k);
            points.iter().map(|&p| basis.eval(p)).collect()
        }
        BasisKind::SegmentPk => {
            let basis = SegmentBasis::new(k);
            points.iter().map(|p| BasisEval { values: basis.values(p[0]), gradients: Vec::new() }).collect()
        }
    }
}
