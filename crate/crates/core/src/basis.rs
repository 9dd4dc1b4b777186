//! Orthonormalised B-spline basis on `[0, 1]` and its smoothness penalties.
//!
//! Raw B-splines on equally spaced knots are evaluated on a composite
//! Gauss–Legendre grid, their weighted Gram matrix `G` is formed, and the
//! symmetric inverse square root `G^{-1/2}` maps them to a basis that is
//! orthonormal in `L²[0, 1]`. Because of that orthonormality the magnitude
//! penalty is exactly the identity; the curvature penalty is the Gram
//! matrix of second derivatives, obtained analytically from the B-spline
//! recurrence and mapped through the same coefficients.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen_ascending, symmetrize};

/// Reproducible description of a basis; enough to rebuild it bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSpec {
    /// Number of basis functions `Q`.
    pub dim: usize,
    pub degree: usize,
    /// Gauss–Legendre nodes per knot span.
    pub nodes_per_span: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { dim: 20, degree: 3, nodes_per_span: 10 }
    }
}

/// Clamped knot vector with equally spaced interior knots on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct KnotVector {
    degree: usize,
    interior: Vec<f64>,
    expanded: Vec<f64>,
}

impl KnotVector {
    pub fn uniform(dim: usize, degree: usize) -> Result<Self> {
        if degree < 2 {
            return Err(Error::Config(format!(
                "spline degree must be at least 2 for a curvature penalty, got {degree}"
            )));
        }
        if dim < degree + 2 {
            return Err(Error::Config(format!(
                "basis dimension {dim} too small for degree {degree} (need at least {})",
                degree + 2
            )));
        }
        let n_interior = dim - degree - 1;
        let interior: Vec<f64> = (1..=n_interior).map(|j| j as f64 / (n_interior + 1) as f64).collect();
        let mut expanded = vec![0.0; degree + 1];
        expanded.extend_from_slice(&interior);
        expanded.extend(std::iter::repeat_n(1.0, degree + 1));
        Ok(Self { degree, interior, expanded })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn expanded(&self) -> &[f64] {
        &self.expanded
    }

    pub fn n_basis(&self) -> usize {
        self.expanded.len() - self.degree - 1
    }

    /// Span boundaries `0 = b_0 < b_1 < … < b_S = 1`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = vec![0.0];
        b.extend_from_slice(&self.interior);
        b.push(1.0);
        b
    }

    fn find_span(&self, t: f64) -> usize {
        let n = self.n_basis() - 1;
        let u = &self.expanded;
        if t >= u[n + 1] {
            return n;
        }
        let (mut lo, mut hi) = (self.degree, n + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < u[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Nonzero B-spline values and derivatives at `t`.
    ///
    /// Returns the span index `i` and `ders[k][j]`, the k-th derivative of
    /// basis function `i - degree + j`.
    fn derivatives(&self, t: f64, n_deriv: usize) -> (usize, Vec<Vec<f64>>) {
        let p = self.degree;
        let u = &self.expanded;
        let span = self.find_span(t);
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; n_deriv + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=n_deriv {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    let rk = rk as usize;
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
                    d = a[s2][0] * ndu[rk][pk];
                }
                let j1: isize = if rk >= -1 { 1 } else { -rk };
                let j2: isize = if (r as isize - 1) <= pk as isize { k as isize - 1 } else { (p - r) as isize };
                let mut j = j1;
                while j <= j2 {
                    let ju = j as usize;
                    let idx = (rk + j) as usize;
                    a[s2][ju] = (a[s1][ju] - a[s1][ju - 1]) / ndu[pk + 1][idx];
                    d += a[s2][ju] * ndu[idx][pk];
                    j += 1;
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for (k, row) in ders.iter_mut().enumerate().skip(1) {
            for v in row.iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        (span, ders)
    }

    /// Full row of raw B-spline values (order 0) or derivatives at `t`.
    pub fn raw_row(&self, t: f64, order: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (span, ders) = self.derivatives(t, order);
        let first = span - self.degree;
        for (j, v) in ders[order].iter().enumerate() {
            out[first + j] = *v;
        }
    }
}

/// Composite quadrature rule on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// Polynomial degree integrated exactly on every span.
    pub exact_degree: usize,
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 {
                1.0
            } else if n == 1 {
                x
            } else {
                p1
            };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pnm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

impl QuadratureRule {
    pub fn composite_gauss_legendre(breakpoints: &[f64], nodes_per_span: usize) -> Self {
        let (gx, gw) = gauss_legendre(nodes_per_span);
        let mut nodes = Vec::with_capacity((breakpoints.len() - 1) * nodes_per_span);
        let mut weights = Vec::with_capacity(nodes.capacity());
        for w in breakpoints.windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (x, wt) in gx.iter().zip(&gw) {
                nodes.push(mid + half * x);
                weights.push(half * wt);
            }
        }
        Self { nodes, weights, exact_degree: 2 * nodes_per_span - 1 }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&t, &w)| w * f(t)).sum()
    }
}

/// Orthonormal spline basis with its penalty matrices.
#[derive(Debug, Clone)]
pub struct OrthoBasis {
    spec: BasisSpec,
    knots: KnotVector,
    /// Maps raw B-spline rows to orthonormal rows: `B(t) = b_raw(t) · coeff`.
    coeff: DMatrix<f64>,
    quadrature: QuadratureRule,
    p0: DMatrix<f64>,
    p2: DMatrix<f64>,
}

impl OrthoBasis {
    pub fn build(dim: usize, degree: usize, nodes_per_span: usize) -> Result<Self> {
        Self::from_spec(&BasisSpec { dim, degree, nodes_per_span })
    }

    pub fn from_spec(spec: &BasisSpec) -> Result<Self> {
        let knots = KnotVector::uniform(spec.dim, spec.degree)?;
        // Products of two degree-p pieces need exactness up to degree 2p.
        if 2 * spec.nodes_per_span < 2 * spec.degree + 1 {
            return Err(Error::Config(format!(
                "{} quadrature nodes per span cannot integrate products of degree-{} splines exactly",
                spec.nodes_per_span, spec.degree
            )));
        }
        let quadrature = QuadratureRule::composite_gauss_legendre(&knots.breakpoints(), spec.nodes_per_span);
        let q = spec.dim;
        let mut gram = DMatrix::zeros(q, q);
        let mut gram2 = DMatrix::zeros(q, q);
        let mut row = vec![0.0; q];
        for (&t, &w) in quadrature.nodes.iter().zip(&quadrature.weights) {
            knots.raw_row(t, 0, &mut row);
            accumulate_outer(&mut gram, &row, w);
            knots.raw_row(t, 2, &mut row);
            accumulate_outer(&mut gram2, &row, w);
        }
        symmetrize(&mut gram);
        symmetrize(&mut gram2);
        let (vals, vecs) = sym_eigen_ascending(&gram);
        if !(vals[0] > 0.0) || !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "raw B-spline Gram matrix is not positive definite (smallest eigenvalue {:e})",
                vals[0]
            )));
        }
        let scaled = DMatrix::from_fn(q, q, |i, j| vecs[(i, j)] / vals[j].sqrt());
        let mut coeff = &scaled * vecs.transpose();
        symmetrize(&mut coeff);
        let mut p2 = &coeff * gram2 * &coeff;
        symmetrize(&mut p2);
        if !p2.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite curvature penalty".into()));
        }
        Ok(Self { spec: *spec, knots, coeff, quadrature, p0: DMatrix::identity(q, q), p2 })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn coeff(&self) -> &DMatrix<f64> {
        &self.coeff
    }

    pub fn quadrature(&self) -> &QuadratureRule {
        &self.quadrature
    }

    /// Magnitude penalty `∫ f²`; the identity for an orthonormal basis.
    pub fn p0(&self) -> &DMatrix<f64> {
        &self.p0
    }

    /// Curvature penalty `∫ (f'')²`.
    pub fn p2(&self) -> &DMatrix<f64> {
        &self.p2
    }

    /// `alpha·P0 + (1 − alpha)·P2`, positive definite for `alpha > 0`.
    pub fn penalty_alpha(&self, alpha: f64) -> Result<DMatrix<f64>> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("penalty mix alpha must lie in (0, 1], got {alpha}")));
        }
        Ok(&self.p0 * alpha + &self.p2 * (1.0 - alpha))
    }

    /// Basis values, one row per point.
    pub fn evaluate(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        self.evaluate_derivative(points, 0)
    }

    /// Derivatives of order 0, 1 or 2 of the orthonormal basis.
    pub fn evaluate_derivative(&self, points: &[f64], order: usize) -> Result<DMatrix<f64>> {
        if order > self.spec.degree {
            return Err(Error::Config(format!("derivative order {order} exceeds spline degree {}", self.spec.degree)));
        }
        let q = self.dim();
        let p = self.spec.degree;
        let mut out = DMatrix::zeros(points.len(), q);
        for (m, &t) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Domain(format!("evaluation point {t} lies outside [0, 1]")));
            }
            let (span, ders) = self.knots.derivatives(t, order);
            let first = span - p;
            for (j, &raw) in ders[order].iter().enumerate() {
                if raw == 0.0 {
                    continue;
                }
                let r = first + j;
                for c in 0..q {
                    out[(m, c)] += raw * self.coeff[(r, c)];
                }
            }
        }
        Ok(out)
    }

    /// Gram matrix of the orthonormal basis under the stored quadrature.
    pub fn gram(&self) -> DMatrix<f64> {
        let b = self.evaluate(&self.quadrature.nodes).expect("quadrature nodes lie in [0,1]");
        let mut weighted = b.clone();
        for (mut row, &w) in weighted.row_iter_mut().zip(&self.quadrature.weights) {
            row *= w;
        }
        b.transpose() * weighted
    }

    /// Writes `t,b1..bQ` rows for plotting.
    pub fn write_basis_csv<W: Write>(&self, points: &[f64], out: W) -> Result<()> {
        let values = self.evaluate(points)?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim()).map(|q| format!("b{q}")));
        w.write_record(&header)?;
        for (m, &t) in points.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(values.row(m).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes a dense matrix as headerless CSV.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn accumulate_outer(target: &mut DMatrix<f64>, row: &[f64], weight: f64) {
    let n = row.len();
    for i in 0..n {
        let ri = row[i];
        if ri == 0.0 {
            continue;
        }
        for j in 0..n {
            target[(i, j)] += weight * ri * row[j];
        }
    }
}
