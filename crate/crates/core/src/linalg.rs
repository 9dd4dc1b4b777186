//! Dense linear-algebra building blocks: the polar map onto the Stiefel
//! manifold and its reverse-mode derivative, Procrustes rotations, and
//! Gaussian sampling helpers.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::stats::std_normal;

/// Relative eigenvalue floor of `XᵀX` below which `X` counts as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Eigendecomposition of a symmetric matrix with eigenvalues ascending.
pub fn sym_eigen_ascending(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Orthonormal polar factor `Ψ = X (XᵀX)^{-1/2}` with the pieces needed to
/// differentiate through it.
#[derive(Debug, Clone)]
pub struct Polar {
    pub psi: DMatrix<f64>,
    /// Eigenvectors `Z` of `XᵀX`.
    pub evecs: DMatrix<f64>,
    /// Square roots of the eigenvalues of `XᵀX`.
    pub sqrt_evals: DVector<f64>,
    /// `(XᵀX)^{-1/2} = Z D^{-1/2} Zᵀ`.
    pub inv_sqrt: DMatrix<f64>,
}

pub fn polar_factor(x: &DMatrix<f64>) -> Result<Polar> {
    let k = x.ncols();
    if x.nrows() < k {
        return Err(Error::Shape(format!(
            "polar factor needs at least as many rows as columns, got {}x{}",
            x.nrows(),
            k
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in X".into()));
    }
    let gram = x.transpose() * x;
    let (vals, vecs) = sym_eigen_ascending(&gram);
    let largest = vals[k - 1];
    if !(largest > 0.0) || vals[0] < RANK_TOLERANCE * largest {
        return Err(Error::Numerical(format!(
            "X is rank deficient (eigenvalues of XᵀX span [{:e}, {:e}])",
            vals[0], largest
        )));
    }
    let sqrt_evals = vals.map(f64::sqrt);
    let scaled = DMatrix::from_fn(k, k, |i, j| vecs[(i, j)] / sqrt_evals[j]);
    let inv_sqrt = &scaled * vecs.transpose();
    let psi = x * &inv_sqrt;
    Ok(Polar { psi, evecs: vecs, sqrt_evals, inv_sqrt })
}

/// Pull a gradient with respect to `Ψ` back to `X`.
///
/// The divided differences of `d ↦ d^{-1/2}` are
/// `-1 / (s_i s_j (s_i + s_j))` with `s = √d`, which stays finite for
/// coincident eigenvalues, so no gap-based fallback is needed.
pub fn polar_pullback(x: &DMatrix<f64>, polar: &Polar, grad_psi: &DMatrix<f64>) -> DMatrix<f64> {
    let k = x.ncols();
    let s = &polar.sqrt_evals;
    let z = &polar.evecs;
    let c = x.transpose() * grad_psi;
    let zcz = z.transpose() * c * z;
    let weighted = DMatrix::from_fn(k, k, |i, j| -zcz[(i, j)] / (s[i] * s[j] * (s[i] + s[j])));
    let e = z * weighted * z.transpose();
    let e_sym = &e + e.transpose();
    grad_psi * &polar.inv_sqrt + x * e_sym
}

/// Orthogonal `R` minimising `‖target − source·R‖_F`, from the SVD of
/// `cross = sourceᵀ·target`.
///
/// Each singular pair is sign-normalised so the largest-magnitude entry of
/// the left vector is positive, which makes `R` deterministic when
/// singular values are tied or zero.
pub fn procrustes_rotation(cross: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = cross.clone().svd(true, true);
    let mut u = svd.u.expect("svd u");
    let mut v_t = svd.v_t.expect("svd v_t");
    for i in 0..u.ncols() {
        let col = u.column(i);
        let (mut best, mut idx) = (0.0_f64, 0);
        for (r, val) in col.iter().enumerate() {
            if val.abs() > best {
                best = val.abs();
                idx = r;
            }
        }
        if u[(idx, i)] < 0.0 {
            u.column_mut(i).neg_mut();
            v_t.row_mut(i).neg_mut();
        }
    }
    u * v_t
}

/// Closest matrix with orthonormal columns (polar factor via thin SVD).
pub fn orthonormalize_svd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = m.ncols();
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(max_sv > 0.0) || min_sv < 1e-10 * max_sv {
        return Err(Error::Numerical(format!(
            "matrix has rank below {k} (singular values span [{min_sv:e}, {max_sv:e}])"
        )));
    }
    Ok(svd.u.expect("svd u") * svd.v_t.expect("svd v_t"))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let chol = Cholesky::new(sym).ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Draw from `N(mean, cov)` by Cholesky of the symmetrised covariance.
pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let mut sym = cov.clone();
    symmetrize(&mut sym);
    let chol = Cholesky::new(sym).ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    let z = DVector::from_fn(mean.len(), |_, _| std_normal(rng));
    Ok(mean + chol.l() * z)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}
