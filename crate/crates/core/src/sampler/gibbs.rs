//! Closed-form full conditionals.
//!
//! Each `*_params` function returns the parameters of a conditional
//! distribution at the current state, so tests can compare draws against
//! the analytic form; the `gibbs_*` functions draw from them. Inverse-gamma
//! parameters are `(shape, scale)` and gamma parameters `(shape, rate)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::Result;
use crate::linalg::{sample_mvn, spd_inverse, symmetrize};
use crate::posterior::{Model, ParameterState};
use crate::stats::{sample_gamma_rate, sample_inv_gamma};

/// Mean and FPC curves of every variable at the pooled times.
fn curves(model: &Model, state: &ParameterState, psi: &DMatrix<f64>) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let d = model.dims();
    (0..d.p)
        .map(|p| {
            let bt = model.basis_t();
            (bt * state.w_mu.rows(p * d.q, d.q), bt * psi.rows(p * d.q, d.q))
        })
        .collect()
}

/// Noise variances: `IG(a + n_p/2, b + Σ r²/2)`.
pub fn sigma2_params(model: &Model, state: &ParameterState, psi: &DMatrix<f64>) -> Vec<(f64, f64)> {
    let pr = model.priors();
    let fitted = model.fitted(state, psi);
    let data = model.data();
    (0..model.dims().p)
        .map(|p| {
            let range = data.block_range(p);
            let n = range.len() as f64;
            let ss: f64 = range.map(|l| (data.observations()[l].y - fitted[l]).powi(2)).sum();
            (pr.sigma2_shape + 0.5 * n, pr.sigma2_scale + 0.5 * ss)
        })
        .collect()
}

/// Eigenvalues ignoring the ordering: `IG(a + N/2, b + Σ_i ξ_ik²/2)`.
pub fn lambda_params(model: &Model, state: &ParameterState) -> Vec<(f64, f64)> {
    let pr = model.priors();
    let xi = state.scores();
    let n = xi.nrows() as f64;
    (0..xi.ncols()).map(|k| (pr.lambda_shape + 0.5 * n, pr.lambda_scale + 0.5 * xi.column(k).norm_squared())).collect()
}

/// Mean smoothing parameters: `Γ(a + Q/2, b + wᵀP_αw/2)`.
pub fn h_mu_params(model: &Model, state: &ParameterState) -> Vec<(f64, f64)> {
    let d = model.dims();
    let pr = model.priors();
    (0..d.p)
        .map(|p| {
            let w = state.w_mu.rows(p * d.q, d.q);
            let quad = w.dot(&(model.penalty() * w));
            (pr.h_mu_shape + 0.5 * d.q as f64, pr.h_mu_rate + 0.5 * quad)
        })
        .collect()
}

/// FPC smoothing parameters, indexed `[p][k]`.
pub fn h_psi_params(model: &Model, psi: &DMatrix<f64>) -> Vec<Vec<(f64, f64)>> {
    let d = model.dims();
    let pr = model.priors();
    (0..d.p)
        .map(|p| {
            let block = psi.rows(p * d.q, d.q);
            let pen = model.penalty() * block;
            (0..d.k)
                .map(|k| {
                    let quad = block.column(k).dot(&pen.column(k));
                    (pr.h_psi_shape + 0.5 * d.q as f64, pr.h_psi_rate + 0.5 * quad)
                })
                .collect()
        })
        .collect()
}

/// Mean weights of variable `p`: Gaussian with precision
/// `h P_α + Σ_i B_iᵀB_i/σ²` and mean `Σ · Σ_i B_iᵀD_i/σ²`, where `D` are
/// the data minus the FPC contribution.
pub fn w_mu_params(
    model: &Model,
    state: &ParameterState,
    psi: &DMatrix<f64>,
    p: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = model.dims();
    let bt = model.basis_t();
    let m = bt.nrows();
    let phi_t = bt * psi.rows(p * d.q, d.q);
    let xi = state.scores();
    let mut counts = vec![0.0; m];
    let mut sums = DVector::zeros(m);
    for o in model.data().block(p) {
        let mut resid = o.y;
        for c in 0..d.k {
            resid -= phi_t[(o.time_idx, c)] * xi[(o.subject, c)];
        }
        counts[o.time_idx] += 1.0;
        sums[o.time_idx] += resid;
    }
    let s2 = state.sigma2[p];
    let mut weighted = bt.clone();
    for (mut row, &c) in weighted.row_iter_mut().zip(&counts) {
        row *= c / s2;
    }
    let mut precision = model.penalty() * state.h_mu[p] + bt.tr_mul(&weighted);
    symmetrize(&mut precision);
    let cov = spd_inverse(&precision)?;
    let mean = &cov * (bt.tr_mul(&sums) / s2);
    Ok((mean, cov))
}

/// Conditional Gaussian of one subject's scores given the other parameters.
///
/// Each block holds the FPC design rows `B(T_i)Ψ` (`J × K`), the residuals
/// after removing the mean (`J`), and the noise variance of that variable.
/// Precision is `Λ⁻¹ + Σ_p ΦᵀΦ/σ²_p`; mean is `Σ · Σ_p ΦᵀR/σ²_p`.
pub fn conditional_scores(
    blocks: &[(DMatrix<f64>, DVector<f64>, f64)],
    lambda: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = lambda.len();
    let mut precision = DMatrix::from_diagonal(&DVector::from_iterator(k, lambda.iter().map(|l| 1.0 / l)));
    let mut rhs = DVector::zeros(k);
    for (phi, resid, s2) in blocks {
        precision += phi.tr_mul(phi) / *s2;
        rhs += phi.tr_mul(resid) / *s2;
    }
    symmetrize(&mut precision);
    let cov = spd_inverse(&precision)?;
    let mean = &cov * rhs;
    Ok((mean, cov))
}

fn subject_blocks(
    model: &Model,
    state: &ParameterState,
    curves: &[(DVector<f64>, DMatrix<f64>)],
    i: usize,
) -> Vec<(DMatrix<f64>, DVector<f64>, f64)> {
    let data = model.data();
    let k = model.dims().k;
    (0..model.dims().p)
        .filter(|&p| data.count(i, p) > 0)
        .map(|p| {
            let idx = data.subject_obs(i, p);
            let (mu_t, phi_t) = &curves[p];
            let phi = DMatrix::from_fn(idx.len(), k, |r, c| phi_t[(data.observations()[idx[r]].time_idx, c)]);
            let resid = DVector::from_iterator(
                idx.len(),
                idx.iter().map(|&l| {
                    let o = data.observations()[l];
                    o.y - mu_t[o.time_idx]
                }),
            );
            (phi, resid, state.sigma2[p])
        })
        .collect()
}

/// Scores of subject `i` (in the state's storage order of `λ`).
pub fn score_params(
    model: &Model,
    state: &ParameterState,
    psi: &DMatrix<f64>,
    i: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let c = curves(model, state, psi);
    conditional_scores(&subject_blocks(model, state, &c, i), &state.lambda)
}

pub fn gibbs_sigma2<R: Rng + ?Sized>(model: &Model, state: &mut ParameterState, psi: &DMatrix<f64>, rng: &mut R) {
    for (p, (shape, scale)) in sigma2_params(model, state, psi).into_iter().enumerate() {
        state.sigma2[p] = sample_inv_gamma(shape, scale, rng);
    }
}

/// Joint independent proposal for all eigenvalues, kept only if strictly
/// ascending; the scores `ξ` are held fixed. Returns whether it was kept.
pub fn gibbs_lambda<R: Rng + ?Sized>(model: &Model, state: &mut ParameterState, rng: &mut R) -> bool {
    let xi = state.scores();
    let proposal: Vec<f64> =
        lambda_params(model, state).into_iter().map(|(a, b)| sample_inv_gamma(a, b, rng)).collect();
    let ordered = proposal.windows(2).all(|w| w[0] < w[1]) && proposal.iter().all(|l| *l > 0.0 && l.is_finite());
    if ordered {
        state.lambda = proposal;
        state.set_scores(&xi);
    }
    ordered
}

/// Conditional of the shift `δ` that moves every mean by `Ψδ` and every
/// subject's scores by `-δ`. The likelihood is constant along this
/// direction, so only the mean smoothing and score priors enter:
/// precision `Σ_p h_p Ψ_pᵀ P Ψ_p + N Λ⁻¹`, linear term
/// `Λ⁻¹ Σ_i ξ_i - Σ_p h_p Ψ_pᵀ P w_p`. Returns `(mean, cov)`.
pub fn mean_shift_params(
    model: &Model,
    state: &ParameterState,
    psi: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = model.dims();
    let xi = state.scores();
    let mut precision =
        DMatrix::from_diagonal(&DVector::from_iterator(d.k, state.lambda.iter().map(|l| d.n as f64 / l)));
    let mut linear = DVector::from_iterator(d.k, (0..d.k).map(|k| xi.column(k).sum() / state.lambda[k]));
    for p in 0..d.p {
        let block = psi.rows(p * d.q, d.q);
        let pen_block = model.penalty() * block;
        let h = state.h_mu[p];
        precision += block.tr_mul(&pen_block) * h;
        linear -= pen_block.tr_mul(&state.w_mu.rows(p * d.q, d.q)) * h;
    }
    symmetrize(&mut precision);
    let cov = spd_inverse(&precision)?;
    Ok((&cov * linear, cov))
}

/// Exact draw along the mean/score shift direction. Translations have unit
/// Jacobian, so drawing `δ` from its conditional leaves the joint invariant;
/// it removes the ridge that otherwise makes the means mix slowly.
pub fn shift_mean<R: Rng + ?Sized>(
    model: &Model,
    state: &mut ParameterState,
    psi: &DMatrix<f64>,
    rng: &mut R,
) -> Result<()> {
    let (mean, cov) = mean_shift_params(model, state, psi)?;
    let delta = sample_mvn(&mean, &cov, rng)?;
    apply_mean_shift(state, psi, &delta);
    Ok(())
}

/// Moves the means by `Ψδ` and every subject's scores by `-δ`.
pub fn apply_mean_shift(state: &mut ParameterState, psi: &DMatrix<f64>, delta: &DVector<f64>) {
    state.w_mu += psi * delta;
    let mut xi = state.scores();
    for mut row in xi.row_iter_mut() {
        row -= delta.transpose();
    }
    state.set_scores(&xi);
}

/// Log acceptance ratio for exchanging the labels of components `c` and
/// `c + 1`. The likelihood and the priors on `X` and `H` are invariant
/// under the swap, so only the score prior enters.
pub fn swap_log_ratio(state: &ParameterState, c: usize) -> f64 {
    let xi = state.scores();
    let (a, b) = (state.lambda[c], state.lambda[c + 1]);
    let (sa, sb) = (xi.column(c).norm_squared(), xi.column(c + 1).norm_squared());
    // log N(ξ_b; 0, λ_a) + log N(ξ_a; 0, λ_b) − log N(ξ_a; 0, λ_a) − log N(ξ_b; 0, λ_b)
    -0.5 * (sb / a + sa / b - sa / a - sb / b)
}

/// Exchanges columns `c, c + 1` of `X`, `H` and the scores, leaving the
/// eigenvalues in place.
pub fn swap_components(state: &mut ParameterState, c: usize) {
    let mut xi = state.scores();
    xi.swap_columns(c, c + 1);
    state.x.swap_columns(c, c + 1);
    state.h_psi.swap_columns(c, c + 1);
    state.set_scores(&xi);
}

/// Metropolis move over the labels of each adjacent pair of components.
/// Returns the number of accepted swaps.
pub fn swap_labels<R: Rng + ?Sized>(state: &mut ParameterState, rng: &mut R) -> usize {
    let mut accepted = 0;
    for c in 0..state.lambda.len().saturating_sub(1) {
        let log_ratio = swap_log_ratio(state, c);
        if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
            swap_components(state, c);
            accepted += 1;
        }
    }
    accepted
}

pub fn gibbs_smoothing<R: Rng + ?Sized>(model: &Model, state: &mut ParameterState, psi: &DMatrix<f64>, rng: &mut R) {
    for (p, (a, b)) in h_mu_params(model, state).into_iter().enumerate() {
        state.h_mu[p] = sample_gamma_rate(a, b, rng);
    }
    for (p, row) in h_psi_params(model, psi).into_iter().enumerate() {
        for (k, (a, b)) in row.into_iter().enumerate() {
            state.h_psi[(p, k)] = sample_gamma_rate(a, b, rng);
        }
    }
}

pub fn gibbs_w_mu<R: Rng + ?Sized>(
    model: &Model,
    state: &mut ParameterState,
    psi: &DMatrix<f64>,
    rng: &mut R,
) -> Result<()> {
    let q = model.dims().q;
    for p in 0..model.dims().p {
        let (mean, cov) = w_mu_params(model, state, psi, p)?;
        let draw = sample_mvn(&mean, &cov, rng)?;
        state.w_mu.rows_mut(p * q, q).copy_from(&draw);
    }
    Ok(())
}

pub fn gibbs_scores<R: Rng + ?Sized>(
    model: &Model,
    state: &mut ParameterState,
    psi: &DMatrix<f64>,
    rng: &mut R,
) -> Result<()> {
    let c = curves(model, state, psi);
    let mut xi = state.scores();
    for i in 0..model.dims().n {
        let (mean, cov) = conditional_scores(&subject_blocks(model, state, &c, i), &state.lambda)?;
        let draw = sample_mvn(&mean, &cov, rng)?;
        xi.row_mut(i).copy_from(&draw.transpose());
    }
    state.set_scores(&xi);
    Ok(())
}

/// One sweep over every conjugate block plus the label-swap and mean-shift
/// moves; `X` only changes through label swaps.
/// Returns whether the eigenvalue proposal was kept.
pub fn sweep<R: Rng + ?Sized>(model: &Model, state: &mut ParameterState, rng: &mut R) -> Result<bool> {
    let mut psi = state.psi()?;
    gibbs_w_mu(model, state, &psi, rng)?;
    gibbs_scores(model, state, &psi, rng)?;
    let kept = gibbs_lambda(model, state, rng);
    if swap_labels(state, rng) > 0 {
        psi = state.psi()?;
    }
    shift_mean(model, state, &psi, rng)?;
    gibbs_sigma2(model, state, &psi, rng);
    gibbs_smoothing(model, state, &psi, rng);
    Ok(kept)
}
