//! Parameter spaces, the polar map `X → Ψ`, and the joint log posterior
//! with its analytic gradient.
//!
//! The model for variable `p`, subject `i` and pooled time `t_m` is
//!
//! ```text
//! y = B(t_m) w_mu[p] + Σ_k ξ_ik B(t_m) ψ_k[p] + ε,   ε ~ N(0, σ²_p)
//! ```
//!
//! with `Ψ = polar(X)` orthonormal, `ξ_ik = z_ik √λ_k`, standard normal
//! priors on `X` and `z`, inverse-gamma priors on `σ²` and `λ`, gamma
//! priors on the smoothing parameters, and quadratic smoothing penalties
//! `Q/2·log h − h/2·θᵀP_αθ` on every mean and FPC weight block.
//!
//! Gamma distributions use the shape–rate convention; inverse-gamma ones
//! are parameterised by shape and scale (the rate of the reciprocal).

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::OrthoBasis;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{polar_factor, polar_pullback};
use crate::stats::{gamma_log_density, inv_gamma_log_density, neumaier_sum, std_normal};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Hyperparameters of the variance and smoothing priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Priors {
    pub sigma2_shape: f64,
    pub sigma2_scale: f64,
    pub lambda_shape: f64,
    pub lambda_scale: f64,
    pub h_mu_shape: f64,
    pub h_mu_rate: f64,
    pub h_psi_shape: f64,
    pub h_psi_rate: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            sigma2_shape: 0.01,
            sigma2_scale: 0.01,
            lambda_shape: 0.01,
            lambda_scale: 0.01,
            h_mu_shape: 0.01,
            h_mu_rate: 0.01,
            h_psi_shape: 0.01,
            h_psi_rate: 0.01,
        }
    }
}

impl Priors {
    fn validate(&self) -> Result<()> {
        let all = [
            ("sigma2_shape", self.sigma2_shape),
            ("sigma2_scale", self.sigma2_scale),
            ("lambda_shape", self.lambda_shape),
            ("lambda_scale", self.lambda_scale),
            ("h_mu_shape", self.h_mu_shape),
            ("h_mu_rate", self.h_mu_rate),
            ("h_psi_shape", self.h_psi_shape),
            ("h_psi_rate", self.h_psi_rate),
        ];
        for (name, v) in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("prior hyperparameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Structural model settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of functional principal components `K`.
    pub n_components: usize,
    /// Mix between magnitude and curvature penalties.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub priors: Priors,
}

fn default_alpha() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn new(n_components: usize) -> Self {
        Self { n_components, alpha: default_alpha(), priors: Priors::default() }
    }
}

/// Problem dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Subjects.
    pub n: usize,
    /// Variables.
    pub p: usize,
    /// Basis functions per variable.
    pub q: usize,
    /// Components.
    pub k: usize,
}

impl Dims {
    pub fn pq(&self) -> usize {
        self.p * self.q
    }
}

/// Offsets of each parameter group in the flat unconstrained vector.
///
/// Order: `log σ²` (P), `w_mu` (PQ), `log h_mu` (P), ordered-positive
/// transform of `λ` (K), `log H` (P·K, column-major), `X` (PQ·K,
/// column-major), `z` (N·K, column-major).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub dims: Dims,
}

impl Layout {
    pub fn new(dims: Dims) -> Self {
        Self { dims }
    }

    pub fn len(&self) -> usize {
        self.scores().end
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sigma2(&self) -> Range<usize> {
        0..self.dims.p
    }

    pub fn w_mu(&self) -> Range<usize> {
        let s = self.sigma2().end;
        s..s + self.dims.pq()
    }

    pub fn h_mu(&self) -> Range<usize> {
        let s = self.w_mu().end;
        s..s + self.dims.p
    }

    pub fn lambda(&self) -> Range<usize> {
        let s = self.h_mu().end;
        s..s + self.dims.k
    }

    pub fn h_psi(&self) -> Range<usize> {
        let s = self.lambda().end;
        s..s + self.dims.p * self.dims.k
    }

    pub fn x(&self) -> Range<usize> {
        let s = self.h_psi().end;
        s..s + self.dims.pq() * self.dims.k
    }

    pub fn scores(&self) -> Range<usize> {
        let s = self.x().end;
        s..s + self.dims.n * self.dims.k
    }
}

/// One point of the parameter space in constrained coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub sigma2: Vec<f64>,
    pub w_mu: DVector<f64>,
    pub h_mu: Vec<f64>,
    /// Eigenvalues, strictly ascending in storage.
    pub lambda: Vec<f64>,
    /// FPC smoothing parameters, `P × K`.
    pub h_psi: DMatrix<f64>,
    /// Unconstrained pre-image of `Ψ`, `PQ × K`.
    pub x: DMatrix<f64>,
    /// Non-centred scores `ξ_ik / √λ_k`, `N × K`.
    pub scores_raw: DMatrix<f64>,
}

impl ParameterState {
    pub fn dims(&self, q: usize) -> Dims {
        Dims { n: self.scores_raw.nrows(), p: self.sigma2.len(), q, k: self.lambda.len() }
    }

    /// Orthonormal FPC weights `Ψ = polar(X)`.
    pub fn psi(&self) -> Result<DMatrix<f64>> {
        Ok(polar_factor(&self.x)?.psi)
    }

    /// Scores `ξ = z·diag(√λ)`.
    pub fn scores(&self) -> DMatrix<f64> {
        let mut xi = self.scores_raw.clone();
        for (k, &l) in self.lambda.iter().enumerate() {
            xi.column_mut(k).scale_mut(l.sqrt());
        }
        xi
    }

    /// Replaces the scores, keeping `z = ξ / √λ` consistent.
    pub fn set_scores(&mut self, xi: &DMatrix<f64>) {
        for (k, &l) in self.lambda.iter().enumerate() {
            let s = l.sqrt();
            for i in 0..xi.nrows() {
                self.scores_raw[(i, k)] = xi[(i, k)] / s;
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        let pos = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x > 0.0);
        pos(&self.sigma2)
            && pos(&self.h_mu)
            && pos(&self.lambda)
            && pos(self.h_psi.as_slice())
            && self.lambda.windows(2).all(|w| w[0] < w[1])
            && self.w_mu.iter().all(|v| v.is_finite())
            && self.x.iter().all(|v| v.is_finite())
            && self.scores_raw.iter().all(|v| v.is_finite())
    }
}

/// Maps an unconstrained vector to constrained coordinates.
pub fn constrain(layout: &Layout, u: &[f64]) -> ParameterState {
    let d = layout.dims;
    let sigma2 = u[layout.sigma2()].iter().map(|v| v.exp()).collect();
    let w_mu = DVector::from_column_slice(&u[layout.w_mu()]);
    let h_mu = u[layout.h_mu()].iter().map(|v| v.exp()).collect();
    let mut lambda = Vec::with_capacity(d.k);
    let mut acc = 0.0;
    for &v in &u[layout.lambda()] {
        acc += v.exp();
        lambda.push(acc);
    }
    let h_psi = DMatrix::from_iterator(d.p, d.k, u[layout.h_psi()].iter().map(|v| v.exp()));
    let x = DMatrix::from_column_slice(d.pq(), d.k, &u[layout.x()]);
    let scores_raw = DMatrix::from_column_slice(d.n, d.k, &u[layout.scores()]);
    ParameterState { sigma2, w_mu, h_mu, lambda, h_psi, x, scores_raw }
}

/// Inverse of [`constrain`]. Fails if the state violates a constraint.
pub fn unconstrain(state: &ParameterState) -> Result<Vec<f64>> {
    if !state.is_valid() {
        return Err(Error::Numerical("state violates positivity or ordering constraints".into()));
    }
    let mut u = Vec::new();
    u.extend(state.sigma2.iter().map(|v| v.ln()));
    u.extend(state.w_mu.iter());
    u.extend(state.h_mu.iter().map(|v| v.ln()));
    let mut prev = 0.0;
    for &l in &state.lambda {
        u.push((l - prev).ln());
        prev = l;
    }
    u.extend(state.h_psi.iter().map(|v| v.ln()));
    u.extend(state.x.iter());
    u.extend(state.scores_raw.iter());
    Ok(u)
}

/// `log |det ∂constrain/∂u|`.
pub fn log_jacobian(layout: &Layout, u: &[f64]) -> f64 {
    let sum = |r: Range<usize>| u[r].iter().sum::<f64>();
    sum(layout.sigma2()) + sum(layout.h_mu()) + sum(layout.lambda()) + sum(layout.h_psi())
}

/// Gradients with respect to the constrained coordinates (with `Ψ` in place
/// of `X`).
#[derive(Debug, Clone)]
pub struct ConstrainedGrad {
    pub sigma2: Vec<f64>,
    pub w_mu: DVector<f64>,
    pub h_mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub h_psi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub x_prior: DMatrix<f64>,
    pub scores_raw: DMatrix<f64>,
}

/// Likelihood contribution of one variable and its partial derivatives.
#[derive(Debug, Clone)]
struct BlockTerms {
    loglik: f64,
    d_sigma2: f64,
    /// `∂/∂(B(t_m) w_mu[p])`, length M.
    g_mu: DVector<f64>,
    /// `∂/∂(B(t_m) ψ_k[p])`, M × K.
    g_phi: DMatrix<f64>,
    /// `∂/∂ξ`, N × K.
    d_xi: DMatrix<f64>,
}

/// Data, basis and configuration bundled for repeated density evaluation.
#[derive(Debug, Clone)]
pub struct Model {
    dims: Dims,
    config: ModelConfig,
    data: Dataset,
    /// Basis evaluated at the pooled times, `M × Q`.
    basis_t: DMatrix<f64>,
    penalty: DMatrix<f64>,
    parallel_blocks: bool,
}

/// Observation count above which variable blocks are evaluated in parallel.
const PARALLEL_MIN_OBS: usize = 20_000;

impl Model {
    pub fn new(data: Dataset, basis: &OrthoBasis, config: ModelConfig) -> Result<Self> {
        config.priors.validate()?;
        let dims = Dims { n: data.n_subjects(), p: data.n_variables(), q: basis.dim(), k: config.n_components };
        if dims.k == 0 {
            return Err(Error::Config("n_components must be at least 1".into()));
        }
        if dims.k > dims.pq() {
            return Err(Error::Config(format!("n_components {} exceeds P·Q = {}", dims.k, dims.pq())));
        }
        let penalty = basis.penalty_alpha(config.alpha)?;
        let basis_t = basis.evaluate(data.times())?;
        let parallel_blocks = dims.p > 1 && data.n_obs() >= PARALLEL_MIN_OBS;
        Ok(Self { dims, config, data, basis_t, penalty, parallel_blocks })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.dims)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn priors(&self) -> &Priors {
        &self.config.priors
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Replaces the response values, keeping the design.
    pub fn set_values(&mut self, y: &[f64]) -> Result<()> {
        self.data = self.data.with_values(y)?;
        Ok(())
    }

    pub fn basis_t(&self) -> &DMatrix<f64> {
        &self.basis_t
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    /// Draws an initial unconstrained point: uniform on `(-2, 2)` for every
    /// coordinate except `X`, which is standard normal.
    pub fn initial_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let layout = self.layout();
        let mut u: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        for v in &mut u[layout.x()] {
            *v = std_normal(rng);
        }
        u
    }

    /// Mean and FPC curves of variable `p` at the pooled times.
    fn block_curves(&self, p: usize, w_mu: &DVector<f64>, psi: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let q = self.dims.q;
        let mu_t = &self.basis_t * w_mu.rows(p * q, q);
        let phi_t = &self.basis_t * psi.rows(p * q, q);
        (mu_t, phi_t)
    }

    fn block_terms(
        &self,
        p: usize,
        w_mu: &DVector<f64>,
        psi: &DMatrix<f64>,
        xi: &DMatrix<f64>,
        sigma2: f64,
        grad: bool,
    ) -> BlockTerms {
        let k = self.dims.k;
        let m = self.data.n_times();
        let (mu_t, phi_t) = self.block_curves(p, w_mu, psi);
        let block = self.data.block(p);
        let mut g_mu = DVector::zeros(if grad { m } else { 0 });
        let mut g_phi = DMatrix::zeros(if grad { m } else { 0 }, k);
        let mut d_xi = DMatrix::zeros(if grad { self.dims.n } else { 0 }, k);
        let mut sq = 0.0;
        for o in block {
            let mut fit = mu_t[o.time_idx];
            for c in 0..k {
                fit += phi_t[(o.time_idx, c)] * xi[(o.subject, c)];
            }
            let r = o.y - fit;
            sq += r * r;
            if grad {
                let s = r / sigma2;
                g_mu[o.time_idx] += s;
                for c in 0..k {
                    g_phi[(o.time_idx, c)] += s * xi[(o.subject, c)];
                    d_xi[(o.subject, c)] += s * phi_t[(o.time_idx, c)];
                }
            }
        }
        let n_obs = block.len() as f64;
        let loglik = -0.5 * n_obs * (LN_2PI + sigma2.ln()) - 0.5 * sq / sigma2;
        let d_sigma2 = -0.5 * n_obs / sigma2 + 0.5 * sq / (sigma2 * sigma2);
        BlockTerms { loglik, d_sigma2, g_mu, g_phi, d_xi }
    }

    fn all_blocks(
        &self,
        w_mu: &DVector<f64>,
        psi: &DMatrix<f64>,
        xi: &DMatrix<f64>,
        sigma2: &[f64],
        grad: bool,
    ) -> Vec<BlockTerms> {
        let eval = |p: usize| self.block_terms(p, w_mu, psi, xi, sigma2[p], grad);
        if self.parallel_blocks {
            (0..self.dims.p).into_par_iter().map(eval).collect()
        } else {
            (0..self.dims.p).map(eval).collect()
        }
    }

    /// Log-likelihood contribution of variable `p`.
    pub fn likelihood_block(&self, p: usize, state: &ParameterState) -> Result<f64> {
        if p >= self.dims.p {
            return Err(Error::Shape(format!("variable index {p} out of range")));
        }
        let psi = state.psi()?;
        Ok(self.block_terms(p, &state.w_mu, &psi, &state.scores(), state.sigma2[p], false).loglik)
    }

    /// Total log-likelihood, summed over variables in index order with
    /// compensated summation.
    pub fn log_likelihood(&self, state: &ParameterState) -> Result<f64> {
        let psi = state.psi()?;
        let blocks = self.all_blocks(&state.w_mu, &psi, &state.scores(), &state.sigma2, false);
        Ok(neumaier_sum(blocks.iter().map(|b| b.loglik)))
    }

    /// Joint log posterior density in constrained coordinates (no
    /// Jacobian). Invalid states give `-inf`.
    pub fn log_posterior(&self, state: &ParameterState) -> f64 {
        if !state.is_valid() {
            return f64::NEG_INFINITY;
        }
        let Ok(polar) = polar_factor(&state.x) else {
            return f64::NEG_INFINITY;
        };
        let lp = self.terms(state, &polar.psi, None);
        if lp.is_finite() {
            lp
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Log posterior and, optionally, its gradient in constrained
    /// coordinates (with respect to `Ψ` rather than `X`).
    fn terms(&self, st: &ParameterState, psi: &DMatrix<f64>, grad: Option<&mut ConstrainedGrad>) -> f64 {
        let d = self.dims;
        let pr = &self.config.priors;
        let qf = d.q as f64;
        let want = grad.is_some();
        let xi = st.scores();
        let blocks = self.all_blocks(&st.w_mu, psi, &xi, &st.sigma2, want);
        let mut parts = Vec::with_capacity(8);
        parts.push(neumaier_sum(blocks.iter().map(|b| b.loglik)));

        // Variance priors.
        parts.push(st.sigma2.iter().map(|&s| inv_gamma_log_density(s, pr.sigma2_shape, pr.sigma2_scale)).sum());
        parts.push(st.lambda.iter().map(|&l| inv_gamma_log_density(l, pr.lambda_shape, pr.lambda_scale)).sum());

        // Mean smoothing.
        let mut pen_w = Vec::with_capacity(d.p);
        let mut mean_part = 0.0;
        for p in 0..d.p {
            let w = st.w_mu.rows(p * d.q, d.q);
            let pw = &self.penalty * w;
            let quad = w.dot(&pw);
            let h = st.h_mu[p];
            mean_part += gamma_log_density(h, pr.h_mu_shape, pr.h_mu_rate) + 0.5 * qf * h.ln() - 0.5 * h * quad;
            pen_w.push((pw, quad));
        }
        parts.push(mean_part);

        // FPC smoothing.
        let mut fpc_part = 0.0;
        let pen_psi: Vec<DMatrix<f64>> = (0..d.p).map(|p| &self.penalty * psi.rows(p * d.q, d.q)).collect();
        let mut quad_psi = DMatrix::zeros(d.p, d.k);
        for p in 0..d.p {
            let block = psi.rows(p * d.q, d.q);
            for k in 0..d.k {
                let quad = block.column(k).dot(&pen_psi[p].column(k));
                quad_psi[(p, k)] = quad;
                let h = st.h_psi[(p, k)];
                fpc_part += gamma_log_density(h, pr.h_psi_shape, pr.h_psi_rate) + 0.5 * qf * h.ln() - 0.5 * h * quad;
            }
        }
        parts.push(fpc_part);

        // Standard normal priors on X and z.
        let nx = st.x.len() as f64;
        let nz = st.scores_raw.len() as f64;
        parts.push(-0.5 * st.x.norm_squared() - 0.5 * nx * LN_2PI);
        parts.push(-0.5 * st.scores_raw.norm_squared() - 0.5 * nz * LN_2PI);
        let lp = neumaier_sum(parts);

        if let Some(g) = grad {
            for p in 0..d.p {
                let s2 = st.sigma2[p];
                g.sigma2[p] = blocks[p].d_sigma2 - (pr.sigma2_shape + 1.0) / s2 + pr.sigma2_scale / (s2 * s2);

                let gw = self.basis_t.tr_mul(&blocks[p].g_mu) - &pen_w[p].0 * st.h_mu[p];
                g.w_mu.rows_mut(p * d.q, d.q).copy_from(&gw);
                let h = st.h_mu[p];
                g.h_mu[p] = 0.5 * qf / h - 0.5 * pen_w[p].1 + (pr.h_mu_shape - 1.0) / h - pr.h_mu_rate;

                let mut gpsi = self.basis_t.tr_mul(&blocks[p].g_phi);
                for k in 0..d.k {
                    let hk = st.h_psi[(p, k)];
                    gpsi.column_mut(k).axpy(-hk, &pen_psi[p].column(k), 1.0);
                    g.h_psi[(p, k)] =
                        0.5 * qf / hk - 0.5 * quad_psi[(p, k)] + (pr.h_psi_shape - 1.0) / hk - pr.h_psi_rate;
                }
                g.psi.rows_mut(p * d.q, d.q).copy_from(&gpsi);
            }
            let mut d_xi = DMatrix::zeros(d.n, d.k);
            for b in &blocks {
                d_xi += &b.d_xi;
            }
            for k in 0..d.k {
                let l = st.lambda[k];
                let sl = l.sqrt();
                let mut via_scores = 0.0;
                for i in 0..d.n {
                    via_scores += d_xi[(i, k)] * st.scores_raw[(i, k)];
                    g.scores_raw[(i, k)] = sl * d_xi[(i, k)] - st.scores_raw[(i, k)];
                }
                g.lambda[k] = via_scores / (2.0 * sl) - (pr.lambda_shape + 1.0) / l + pr.lambda_scale / (l * l);
            }
            g.x_prior = -&st.x;
        }
        lp
    }

    fn zero_grad(&self) -> ConstrainedGrad {
        let d = self.dims;
        ConstrainedGrad {
            sigma2: vec![0.0; d.p],
            w_mu: DVector::zeros(d.pq()),
            h_mu: vec![0.0; d.p],
            lambda: vec![0.0; d.k],
            h_psi: DMatrix::zeros(d.p, d.k),
            psi: DMatrix::zeros(d.pq(), d.k),
            x_prior: DMatrix::zeros(d.pq(), d.k),
            scores_raw: DMatrix::zeros(d.n, d.k),
        }
    }

    /// Log posterior plus log-Jacobian at unconstrained `u`, with gradient
    /// written to `grad`. Invalid points return `-inf` and a zero gradient.
    pub fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let layout = self.layout();
        grad.iter_mut().for_each(|g| *g = 0.0);
        if u.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let st = constrain(&layout, u);
        if !st.is_valid() {
            return f64::NEG_INFINITY;
        }
        let Ok(polar) = polar_factor(&st.x) else {
            return f64::NEG_INFINITY;
        };
        let mut g = self.zero_grad();
        let lp = self.terms(&st, &polar.psi, Some(&mut g)) + log_jacobian(&layout, u);
        if !lp.is_finite() {
            grad.iter_mut().for_each(|v| *v = 0.0);
            return f64::NEG_INFINITY;
        }
        for (slot, (&s, &gs)) in grad[layout.sigma2()].iter_mut().zip(st.sigma2.iter().zip(&g.sigma2)) {
            *slot = s * gs + 1.0;
        }
        grad[layout.w_mu()].copy_from_slice(g.w_mu.as_slice());
        for (slot, (&h, &gh)) in grad[layout.h_mu()].iter_mut().zip(st.h_mu.iter().zip(&g.h_mu)) {
            *slot = h * gh + 1.0;
        }
        let lam = &mut grad[layout.lambda()];
        let mut tail = 0.0;
        for k in (0..self.dims.k).rev() {
            tail += g.lambda[k];
            lam[k] = u[layout.lambda().start + k].exp() * tail + 1.0;
        }
        for (slot, (&h, &gh)) in grad[layout.h_psi()].iter_mut().zip(st.h_psi.iter().zip(g.h_psi.iter())) {
            *slot = h * gh + 1.0;
        }
        let gx = polar_pullback(&st.x, &polar, &g.psi) + &g.x_prior;
        grad[layout.x()].copy_from_slice(gx.as_slice());
        grad[layout.scores()].copy_from_slice(g.scores_raw.as_slice());
        if grad.iter().any(|v| !v.is_finite()) {
            grad.iter_mut().for_each(|v| *v = 0.0);
            return f64::NEG_INFINITY;
        }
        lp
    }

    /// Log conditional density of `X` given everything else (up to a
    /// constant) and its gradient; used by the blocked sampler.
    pub fn log_density_x(&self, state: &ParameterState, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let d = self.dims;
        let xm = DMatrix::from_column_slice(d.pq(), d.k, x);
        if xm.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let Ok(polar) = polar_factor(&xm) else {
            return f64::NEG_INFINITY;
        };
        let xi = state.scores();
        let mut lik = Vec::with_capacity(d.p);
        let mut gpsi = DMatrix::zeros(d.pq(), d.k);
        let mut smooth = 0.0;
        for p in 0..d.p {
            let b = self.block_terms(p, &state.w_mu, &polar.psi, &xi, state.sigma2[p], true);
            lik.push(b.loglik);
            let block = polar.psi.rows(p * d.q, d.q);
            let pen = &self.penalty * block;
            let mut gp = self.basis_t.tr_mul(&b.g_phi);
            for k in 0..d.k {
                let h = state.h_psi[(p, k)];
                smooth -= 0.5 * h * block.column(k).dot(&pen.column(k));
                gp.column_mut(k).axpy(-h, &pen.column(k), 1.0);
            }
            gpsi.rows_mut(p * d.q, d.q).copy_from(&gp);
        }
        let lp = neumaier_sum(lik) + smooth - 0.5 * xm.norm_squared();
        let gx = polar_pullback(&xm, &polar, &gpsi) - &xm;
        if !lp.is_finite() || gx.iter().any(|v| !v.is_finite()) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return f64::NEG_INFINITY;
        }
        grad.copy_from_slice(gx.as_slice());
        lp
    }

    /// Fitted latent values at every stacked observation.
    pub fn fitted(&self, state: &ParameterState, psi: &DMatrix<f64>) -> Vec<f64> {
        let xi = state.scores();
        let mut out = Vec::with_capacity(self.data.n_obs());
        for p in 0..self.dims.p {
            let (mu_t, phi_t) = self.block_curves(p, &state.w_mu, psi);
            for o in self.data.block(p) {
                let mut f = mu_t[o.time_idx];
                for c in 0..self.dims.k {
                    f += phi_t[(o.time_idx, c)] * xi[(o.subject, c)];
                }
                out.push(f);
            }
        }
        out
    }
}
