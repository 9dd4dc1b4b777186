//! Post-processing of posterior draws: Procrustes alignment of the FPCs to
//! a common reference, the posterior FPC point estimate, convergence
//! diagnostics and variance-explained summaries.
//!
//! FPCs are only identified up to rotation, so every draw `s` is rotated by
//! the orthogonal `R` minimising `‖Φ̃ − Φ_s R‖_F`, where `Φ_s` stacks the
//! FPCs of all variables evaluated at the pooled times. Scores rotate by
//! the same `R`, which leaves every fitted trajectory unchanged.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_svd, procrustes_rotation};
use crate::sampler::PosteriorDraws;
use crate::stats::summarize;

/// R-hat above this value flags a parameter as not converged.
pub const RHAT_THRESHOLD: f64 = 1.05;

/// Evaluates stacked per-variable spline weights (`PQ × K`) at the pooled
/// times: `[I_P ⊗ B(T)] Ψ`, a `PM × K` matrix.
pub fn evaluate_blocks(basis_t: &DMatrix<f64>, weights: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, q) = basis_t.shape();
    let p = weights.nrows() / q;
    let mut out = DMatrix::zeros(p * m, weights.ncols());
    for v in 0..p {
        out.rows_mut(v * m, m).copy_from(&(basis_t * weights.rows(v * q, q)));
    }
    out
}

/// Transpose action `[I_P ⊗ B(T)]ᵀ F` for `F` of shape `PM × K`.
pub fn project_blocks(basis_t: &DMatrix<f64>, f: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, q) = basis_t.shape();
    let p = f.nrows() / m;
    let mut out = DMatrix::zeros(p * q, f.ncols());
    for v in 0..p {
        out.rows_mut(v * q, q).copy_from(&basis_t.tr_mul(&f.rows(v * m, m)));
    }
    out
}

/// Where the alignment reference came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// Right singular vectors of the posterior-mean fitted FPC contribution.
    PosteriorMean,
    /// Supplied by the caller (file name or description).
    External(String),
}

/// Draws after Procrustes alignment, in the same chain-major order.
#[derive(Debug, Clone)]
pub struct AlignedDraws {
    pub rotations: Vec<DMatrix<f64>>,
    /// Rotated FPC weights `Ψ R`, `PQ × K`.
    pub psi: Vec<DMatrix<f64>>,
    /// Rotated scores `ξ R` (row `i` is `Rᵀ ξ_i`), `N × K`.
    pub scores: Vec<DMatrix<f64>>,
    pub reference: DMatrix<f64>,
    pub source: ReferenceSource,
    pub n_chains: usize,
    pub n_per_chain: usize,
    /// The reference had (numerical) rank below `K`.
    pub reference_rank_deficient: bool,
}

/// Default reference: the first `K` right singular vectors of the
/// posterior mean of the subject-level FPC contribution `ξ Ψᵀ` (`N × PQ`),
/// evaluated at the pooled times. Because the basis is orthonormal the SVD
/// in coefficient space equals the functional one, so the columns are
/// orthonormal under the sum inner product.
pub fn default_reference(draws: &PosteriorDraws, basis_t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = draws.n_draws();
    if n < 2 {
        return Err(Error::Config("default reference needs at least two draws".into()));
    }
    let d = draws.context.dims;
    let mut mean = DMatrix::zeros(d.n, d.pq());
    for draw in draws.iter() {
        mean += &draw.scores * draw.psi.transpose();
    }
    mean /= n as f64;
    let svd = mean.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    if order.len() < d.k {
        return Err(Error::Numerical(format!("posterior mean has rank at most {} < K = {}", order.len(), d.k)));
    }
    let mut v = DMatrix::zeros(d.pq(), d.k);
    for (c, &idx) in order.iter().take(d.k).enumerate() {
        let mut col = v_t.row(idx).transpose();
        // Deterministic sign: largest-magnitude entry positive.
        let imax = col.iter().enumerate().fold(0, |b, (i, x)| if x.abs() > col[b].abs() { i } else { b });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        v.set_column(c, &col);
    }
    Ok(evaluate_blocks(basis_t, &v))
}

/// Rotates every draw onto `reference` (`PM × K`).
pub fn procrustes_align(
    draws: &PosteriorDraws,
    basis_t: &DMatrix<f64>,
    reference: &DMatrix<f64>,
    source: ReferenceSource,
) -> Result<AlignedDraws> {
    let d = draws.context.dims;
    let m = basis_t.nrows();
    if reference.shape() != (d.p * m, d.k) {
        return Err(Error::Shape(format!(
            "reference must be {}x{}, got {}x{}",
            d.p * m,
            d.k,
            reference.nrows(),
            reference.ncols()
        )));
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("reference contains non-finite values".into()));
    }
    let sv = reference.clone().svd(false, false).singular_values;
    let rank_deficient = sv.min() <= 1e-10 * sv.max().max(f64::MIN_POSITIVE);
    // Φ_sᵀ Φ̃ = Ψ_sᵀ [I ⊗ B]ᵀ Φ̃.
    let projected = project_blocks(basis_t, reference);
    let all: Vec<_> = draws.iter().collect();
    let rotated: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = all
        .par_iter()
        .map(|draw| {
            let r = procrustes_rotation(&draw.psi.tr_mul(&projected));
            let psi = &draw.psi * &r;
            let scores = &draw.scores * &r;
            (r, psi, scores)
        })
        .collect();
    let mut out = AlignedDraws {
        rotations: Vec::with_capacity(all.len()),
        psi: Vec::with_capacity(all.len()),
        scores: Vec::with_capacity(all.len()),
        reference: reference.clone(),
        source,
        n_chains: draws.n_chains(),
        n_per_chain: draws.n_per_chain(),
        reference_rank_deficient: rank_deficient,
    };
    for (r, psi, scores) in rotated {
        out.rotations.push(r);
        out.psi.push(psi);
        out.scores.push(scores);
    }
    Ok(out)
}

/// Orthonormal posterior FPC estimate: polar factor of the mean of `Ψ R`.
pub fn posterior_fpc_estimate(aligned: &AlignedDraws) -> Result<DMatrix<f64>> {
    let first = aligned.psi.first().ok_or_else(|| Error::Data("no aligned draws".into()))?;
    let mut mean = DMatrix::zeros(first.nrows(), first.ncols());
    for psi in &aligned.psi {
        mean += psi;
    }
    mean /= aligned.psi.len() as f64;
    orthonormalize_svd(&mean).map_err(|e| Error::Numerical(format!("mean aligned FPC matrix is rank deficient: {e}")))
}

/// Split-chain potential scale reduction factor.
///
/// Returns `Ok(None)` when the within-chain variance is zero (undefined).
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<Option<f64>> {
    if chains.len() < 2 {
        return Err(Error::Config("R-hat needs at least two chains".into()));
    }
    let n = chains[0].len();
    if n < 4 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::Config("R-hat needs equal-length chains of at least 4 draws".into()));
    }
    let half = n / 2;
    let mut parts: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        parts.push(&c[..half]);
        parts.push(&c[n - half..]);
    }
    let m = parts.len() as f64;
    let len = half as f64;
    let means: Vec<f64> = parts.iter().map(|p| p.iter().sum::<f64>() / len).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = len / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = parts
        .iter()
        .zip(&means)
        .map(|(p, mu)| p.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (len - 1.0))
        .sum::<f64>()
        / m;
    if !(w > 0.0) {
        return Ok(None);
    }
    let var_plus = (len - 1.0) / len * w + b / len;
    Ok(Some((var_plus / w).sqrt()))
}

/// Effective sample size across chains (Geyer's initial monotone sequence).
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.first().map_or(0, Vec::len);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| (0..n - lag).map(|i| (c[i] - mu) * (c[i + lag] - mu)).sum::<f64>() / n as f64)
            .sum::<f64>()
            / m as f64
    };
    let nf = n as f64;
    let acov0 = acov(0);
    let mean_var = acov0 * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        let g = means.iter().sum::<f64>() / m as f64;
        var_plus += means.iter().map(|x| (x - g).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    }
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let rho = |lag: usize| 1.0 - (mean_var - acov(lag)) / var_plus;
    let mut rho_hat = vec![0.0; n + 2];
    rho_hat[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut s = 1;
    while s + 4 < n && even + odd > 0.0 {
        even = rho(s + 1);
        odd = rho(s + 2);
        if even + odd >= 0.0 {
            rho_hat[s + 1] = even;
            rho_hat[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    if even > 0.0 {
        rho_hat[max_s + 1] = even;
    }
    let mut t = 1;
    while t + 3 <= max_s {
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t] {
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2.0;
            rho_hat[t + 2] = rho_hat[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho_hat[..max_s].iter().sum::<f64>() + rho_hat[max_s + 1];
    (total / tau).min(total * total.log10())
}

/// R-hat of one named scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarDiagnostic {
    pub name: String,
    /// `None` when undefined (zero within-chain variance).
    pub rhat: Option<f64>,
    pub ess: f64,
}

/// Convergence report over every scalar parameter after alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub reference: ReferenceSource,
    pub reference_rank_deficient: bool,
    pub n_chains: usize,
    pub n_per_chain: usize,
    pub max_rhat: Option<f64>,
    pub n_rhat_above_threshold: usize,
    pub n_rhat_undefined: usize,
    pub rhat_threshold: f64,
    pub n_divergent: usize,
    pub divergence_fraction: f64,
    pub divergence_flagged: bool,
    pub parameters: Vec<ScalarDiagnostic>,
}

impl AlignmentReport {
    pub fn converged(&self) -> bool {
        self.n_rhat_above_threshold == 0
    }
}

/// Per-chain traces of every scalar: σ², λ, w_mu, h_mu, H, aligned Ψ and
/// aligned scores.
pub fn scalar_traces(draws: &PosteriorDraws, aligned: &AlignedDraws) -> Vec<(String, Vec<Vec<f64>>)> {
    let d = draws.context.dims;
    let c = draws.n_chains();
    let per = draws.n_per_chain();
    let mut out: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    let mut push = |name: String, f: &dyn Fn(usize, usize) -> f64| {
        let traces = (0..c).map(|ch| (0..per).map(|s| f(ch, s)).collect()).collect();
        out.push((name, traces));
    };
    let draw = |ch: usize, s: usize| &draws.chains[ch].draws[s];
    let flat = |ch: usize, s: usize| ch * per + s;
    for p in 0..d.p {
        push(format!("sigma2[{p}]"), &|ch, s| draw(ch, s).sigma2[p]);
    }
    for k in 0..d.k {
        push(format!("lambda[{k}]"), &|ch, s| draw(ch, s).lambda[k]);
    }
    for j in 0..d.pq() {
        push(format!("w_mu[{j}]"), &|ch, s| draw(ch, s).w_mu[j]);
    }
    for p in 0..d.p {
        push(format!("h_mu[{p}]"), &|ch, s| draw(ch, s).h_mu[p]);
    }
    for p in 0..d.p {
        for k in 0..d.k {
            push(format!("h_psi[{p},{k}]"), &|ch, s| draw(ch, s).h_psi[(p, k)]);
        }
    }
    for j in 0..d.pq() {
        for k in 0..d.k {
            push(format!("psi[{j},{k}]"), &|ch, s| aligned.psi[flat(ch, s)][(j, k)]);
        }
    }
    for i in 0..d.n {
        for k in 0..d.k {
            push(format!("scores[{i},{k}]"), &|ch, s| aligned.scores[flat(ch, s)][(i, k)]);
        }
    }
    out
}

pub fn alignment_report(draws: &PosteriorDraws, aligned: &AlignedDraws) -> AlignmentReport {
    let traces = scalar_traces(draws, aligned);
    let parameters: Vec<ScalarDiagnostic> = traces
        .par_iter()
        .map(|(name, chains)| ScalarDiagnostic {
            name: name.clone(),
            rhat: split_rhat(chains).ok().flatten(),
            ess: ess(chains),
        })
        .collect();
    let defined: Vec<f64> = parameters.iter().filter_map(|p| p.rhat).collect();
    let max_rhat = defined.iter().copied().fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    AlignmentReport {
        reference: aligned.source.clone(),
        reference_rank_deficient: aligned.reference_rank_deficient,
        n_chains: draws.n_chains(),
        n_per_chain: draws.n_per_chain(),
        max_rhat,
        n_rhat_above_threshold: defined.iter().filter(|r| **r > RHAT_THRESHOLD).count(),
        n_rhat_undefined: parameters.len() - defined.len(),
        rhat_threshold: RHAT_THRESHOLD,
        n_divergent: draws.n_divergent(),
        divergence_fraction: draws.divergence_fraction(),
        divergence_flagged: draws.divergence_flagged(),
        parameters,
    }
}

/// Posterior mean and equal-tail interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn from_samples(values: &mut [f64], level: f64) -> Self {
        let (mean, lo, hi) = summarize(values, level);
        Self { mean, lo, hi }
    }
}

/// Variance explained when keeping the leading `k` components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceExplained {
    pub k: usize,
    /// `Σ_{j≤k} λ_j / (Σ_j λ_j + Σ_p σ²_p)`.
    pub global: Interval,
    /// Share of the global total carried by each variable's part of the
    /// leading `k` components; sums over variables to `global`.
    pub per_variable: Vec<Interval>,
    /// Within-variable proportion:
    /// `Σ_{j≤k} λ_j‖ψ_j^(p)‖² / (Σ_j λ_j‖ψ_j^(p)‖² + σ²_p)`.
    pub within_variable: Vec<Interval>,
}

/// Variance explained per truncation level, computed per draw on the
/// standardised scale with components in descending eigenvalue order.
pub fn variance_explained(draws: &PosteriorDraws, truncations: &[usize], level: f64) -> Result<Vec<VarianceExplained>> {
    let d = draws.context.dims;
    for &k in truncations {
        if k == 0 || k > d.k {
            return Err(Error::Config(format!("truncation {k} outside 1..={}", d.k)));
        }
    }
    let mut out = Vec::with_capacity(truncations.len());
    for &k in truncations {
        let mut global = Vec::with_capacity(draws.n_draws());
        let mut per_var = vec![Vec::with_capacity(draws.n_draws()); d.p];
        let mut within = vec![Vec::with_capacity(draws.n_draws()); d.p];
        for draw in draws.iter() {
            let noise: f64 = draw.sigma2.iter().sum();
            let total = draw.lambda.iter().sum::<f64>() + noise;
            global.push(draw.lambda[..k].iter().sum::<f64>() / total);
            for p in 0..d.p {
                let mass = |j: usize| draw.lambda[j] * draw.psi.view((p * d.q, j), (d.q, 1)).norm_squared();
                let lead: f64 = (0..k).map(mass).sum();
                let all: f64 = (0..d.k).map(mass).sum();
                per_var[p].push(lead / total);
                within[p].push(lead / (all + draw.sigma2[p]));
            }
        }
        out.push(VarianceExplained {
            k,
            global: Interval::from_samples(&mut global, level),
            per_variable: per_var.iter_mut().map(|v| Interval::from_samples(v, level)).collect(),
            within_variable: within.iter_mut().map(|v| Interval::from_samples(v, level)).collect(),
        });
    }
    Ok(out)
}

/// Pointwise summaries of the aligned FPCs on the standardised scale:
/// returns `(variable, time index, k, interval)` rows.
pub fn fpc_intervals(
    aligned: &AlignedDraws,
    basis_t: &DMatrix<f64>,
    level: f64,
) -> Vec<(usize, usize, usize, Interval)> {
    let m = basis_t.nrows();
    let evaluated: Vec<DMatrix<f64>> = aligned.psi.iter().map(|psi| evaluate_blocks(basis_t, psi)).collect();
    let Some(first) = evaluated.first() else { return Vec::new() };
    let (rows, k) = first.shape();
    let mut out = Vec::with_capacity(rows * k);
    let mut buf = vec![0.0; evaluated.len()];
    for r in 0..rows {
        for c in 0..k {
            for (b, e) in buf.iter_mut().zip(&evaluated) {
                *b = e[(r, c)];
            }
            out.push((r / m, r % m, c, Interval::from_samples(&mut buf, level)));
        }
    }
    out
}

/// Fitted latent values `[I ⊗ B(T)](w_mu + Ψ ξ_i)` for subject `i`.
pub fn fitted_subject(
    basis_t: &DMatrix<f64>,
    w_mu: &DVector<f64>,
    psi: &DMatrix<f64>,
    xi: &DVector<f64>,
) -> DVector<f64> {
    let coef = w_mu + psi * xi;
    let col = DMatrix::from_column_slice(coef.len(), 1, coef.as_slice());
    evaluate_blocks(basis_t, &col).column(0).into_owned()
}
