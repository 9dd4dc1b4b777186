//! Synthetic data generators, accuracy metrics and replicated studies.
//!
//! Two designs are provided: a multivariate one whose FPCs are shared
//! sinusoids split evenly across variables, and a univariate one. Curves
//! live on an equally spaced midpoint grid `t_m = (m − 1/2)/M` of `[0, 1]`
//! and integrals use the matching Riemann weights `1/M`. Each subject and
//! variable is observed at a random subset of grid points.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, OrthoBasis};
use crate::data::{standardize, Record, TimeDomain};
use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_svd, procrustes_rotation};
use crate::persist;
use crate::posterior::{Model, ModelConfig};
use crate::postprocess::{
    alignment_report, default_reference, evaluate_blocks, procrustes_align, project_blocks, Interval, ReferenceSource,
};
use crate::predict::{subject_summary, PredictOptions};
use crate::rng::{stream, tags};
use crate::sampler::{self, PosteriorDraws, SamplerConfig};
use crate::stats::std_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    /// `μ_p(t) = (−1)^p 2 sin((2π + p)t)`, FPCs `(−1)^p √(2/P)` times
    /// alternating sines and cosines of increasing frequency.
    Multivariate,
    /// `μ(t) = 5 sin(2πt)`, FPCs `√2 sin(2πt), √2 cos(4πt), √2 sin(4πt)`.
    Univariate,
}

/// Simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub design: Design,
    pub n_variables: usize,
    pub n_subjects: usize,
    pub n_grid: usize,
    /// Inclusive range of observation counts per subject and variable.
    pub obs_min: usize,
    pub obs_max: usize,
    /// Signal-to-noise ratio `Σλ / σ²_p`; one value for all variables or
    /// one per variable.
    pub snr: Vec<f64>,
    /// True eigenvalues, positive and descending.
    pub eigenvalues: Vec<f64>,
    pub seed: u64,
    pub n_replicates: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            design: Design::Multivariate,
            n_variables: 3,
            n_subjects: 100,
            n_grid: 100,
            obs_min: 3,
            obs_max: 7,
            snr: vec![4.0],
            eigenvalues: vec![1.0, 0.5, 0.25],
            seed: 1,
            n_replicates: 10,
        }
    }
}

impl Scenario {
    pub fn univariate(snr: f64, obs_min: usize, obs_max: usize) -> Self {
        Self { design: Design::Univariate, n_variables: 1, snr: vec![snr], obs_min, obs_max, ..Self::default() }
    }

    pub fn multivariate(snr: f64, obs_min: usize, obs_max: usize) -> Self {
        Self { snr: vec![snr], obs_min, obs_max, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.eigenvalues.len();
        if self.n_variables == 0 || self.n_subjects == 0 || self.n_grid == 0 || k == 0 {
            return Err(Error::Config("scenario sizes must be positive".into()));
        }
        if self.design == Design::Univariate && (self.n_variables != 1 || k > 3) {
            return Err(Error::Config("univariate design needs one variable and at most 3 components".into()));
        }
        if self.obs_min == 0 || self.obs_min > self.obs_max || self.obs_max > self.n_grid {
            return Err(Error::Config(format!(
                "observation range [{}, {}] must lie within [1, {}]",
                self.obs_min, self.obs_max, self.n_grid
            )));
        }
        if self.snr.is_empty() || (self.snr.len() != 1 && self.snr.len() != self.n_variables) {
            return Err(Error::Config("snr needs one value or one per variable".into()));
        }
        if self.snr.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("snr must be positive".into()));
        }
        if self.eigenvalues.iter().any(|l| !(*l > 0.0 && l.is_finite()))
            || self.eigenvalues.windows(2).any(|w| w[0] < w[1])
        {
            return Err(Error::Config("eigenvalues must be positive and descending".into()));
        }
        Ok(())
    }

    /// Noise variance of each variable, `Σλ / SNR_p`.
    pub fn noise_variances(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        (0..self.n_variables).map(|p| total / self.snr[if self.snr.len() == 1 { 0 } else { p }]).collect()
    }
}

/// Ground truth of one replicate.
#[derive(Debug, Clone)]
pub struct Truth {
    pub grid: Vec<f64>,
    /// Mean curves, `P × M`.
    pub mean: DMatrix<f64>,
    /// FPCs evaluated on the grid and stacked by variable, `PM × K`.
    pub fpcs: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Scores, `I × K`.
    pub scores: DMatrix<f64>,
    /// Latent trajectories per subject, each `P × M`.
    pub latent: Vec<DMatrix<f64>>,
}

pub fn midpoint_grid(m: usize) -> Vec<f64> {
    (0..m).map(|j| (j as f64 + 0.5) / m as f64).collect()
}

/// True mean (`P × M`) and FPCs (`PM × K`) of a design on `grid`.
pub fn truth_functions(design: Design, p: usize, k: usize, grid: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = grid.len();
    let mut mean = DMatrix::zeros(p, m);
    let mut fpcs = DMatrix::zeros(p * m, k);
    for v in 0..p {
        let pp = (v + 1) as f64;
        let sign = if (v + 1) % 2 == 0 { 1.0 } else { -1.0 };
        for (j, &t) in grid.iter().enumerate() {
            match design {
                Design::Multivariate => {
                    mean[(v, j)] = sign * 2.0 * ((2.0 * PI + pp) * t).sin();
                    for c in 0..k {
                        let freq = 2.0 * ((c / 2) as f64 + 1.0) * PI * t;
                        let wave = if c % 2 == 0 { freq.sin() } else { freq.cos() };
                        fpcs[(v * m + j, c)] = sign * (2.0 / p as f64).sqrt() * wave;
                    }
                }
                Design::Univariate => {
                    mean[(v, j)] = 5.0 * (2.0 * PI * t).sin();
                    let waves = [(2.0 * PI * t).sin(), (4.0 * PI * t).cos(), (4.0 * PI * t).sin()];
                    for c in 0..k {
                        fpcs[(v * m + j, c)] = 2f64.sqrt() * waves[c];
                    }
                }
            }
        }
    }
    (mean, fpcs)
}

fn subject_name(i: usize) -> String {
    format!("s{:04}", i + 1)
}

fn variable_name(p: usize) -> String {
    format!("y{}", p + 1)
}

/// Generates replicate `replicate` of `scenario`: long-format records and
/// the truth. Scores, and each subject-variable subsample and noise, use
/// their own random streams.
pub fn generate(scenario: &Scenario, replicate: usize) -> Result<(Vec<Record>, Truth)> {
    scenario.validate()?;
    let (p, k, n, m) = (scenario.n_variables, scenario.eigenvalues.len(), scenario.n_subjects, scenario.n_grid);
    let base = [tags::REPLICATE, replicate as u64, tags::GENERATE];
    let grid = midpoint_grid(m);
    let (mean, fpcs) = truth_functions(scenario.design, p, k, &grid);
    let sigma2 = scenario.noise_variances();
    let mut score_rng = stream(scenario.seed, &[base[0], base[1], base[2], tags::SCORES]);
    let scores = DMatrix::from_fn(n, k, |_, c| scenario.eigenvalues[c].sqrt() * std_normal(&mut score_rng));
    let mut latent = Vec::with_capacity(n);
    let mut records = Vec::new();
    for i in 0..n {
        let mut y = mean.clone();
        let contrib = &fpcs * scores.row(i).transpose();
        for v in 0..p {
            for j in 0..m {
                y[(v, j)] += contrib[v * m + j];
            }
        }
        for v in 0..p {
            let mut rng =
                stream(scenario.seed, &[base[0], base[1], base[2], tags::SUBJECT, i as u64, tags::VARIABLE, v as u64]);
            let count = rng.random_range(scenario.obs_min..=scenario.obs_max);
            let mut idx = rand::seq::index::sample(&mut rng, m, count).into_vec();
            idx.sort_unstable();
            for j in idx {
                records.push(Record {
                    subject: subject_name(i),
                    variable: variable_name(v),
                    time: grid[j],
                    value: y[(v, j)] + sigma2[v].sqrt() * std_normal(&mut rng),
                });
            }
        }
        latent.push(y);
    }
    let truth = Truth { grid, mean, fpcs, eigenvalues: scenario.eigenvalues.clone(), sigma2, scores, latent };
    Ok((records, truth))
}

/// Relative integrated squared error of one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiseValue {
    pub rise: f64,
    /// Subjects without observations of the variable, left out of both sums.
    pub n_excluded: usize,
}

/// RISE per variable: ISE of `predicted` against `truth` divided by the ISE
/// of the subject-mean baseline. `baseline[i][p]` is the mean of subject
/// `i`'s observations of variable `p`, or `None` without observations.
/// Trajectories are `P × M` matrices on a grid with weights `weights`.
pub fn rise(
    predicted: &[DMatrix<f64>],
    truth: &[DMatrix<f64>],
    baseline: &[Vec<Option<f64>>],
    weights: &[f64],
) -> Vec<RiseValue> {
    let p = truth.first().map_or(0, |t| t.nrows());
    (0..p)
        .map(|v| {
            let (mut num, mut den, mut excluded) = (0.0, 0.0, 0);
            for ((pred, tr), base) in predicted.iter().zip(truth).zip(baseline) {
                let Some(b) = base[v] else {
                    excluded += 1;
                    continue;
                };
                for (j, w) in weights.iter().enumerate() {
                    num += w * (pred[(v, j)] - tr[(v, j)]).powi(2);
                    den += w * (b - tr[(v, j)]).powi(2);
                }
            }
            RiseValue { rise: num / den, n_excluded: excluded }
        })
        .collect()
}

/// Integrated squared error `Σ_m q_m (f̂(t_m) − f(t_m))²`.
pub fn component_ise(estimate: &[f64], truth: &[f64], weights: &[f64]) -> f64 {
    estimate.iter().zip(truth).zip(weights).map(|((e, t), w)| w * (e - t).powi(2)).sum()
}

/// Share of `truth` values inside their `[lo, hi]` intervals.
pub fn coverage(lo: &[f64], hi: &[f64], truth: &[f64]) -> f64 {
    if truth.is_empty() {
        return f64::NAN;
    }
    let hits = lo.iter().zip(hi).zip(truth).filter(|((l, h), t)| *l <= *t && *t <= *h).count();
    hits as f64 / truth.len() as f64
}

/// Engine settings used for every replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub basis: BasisSpec,
    pub model: ModelConfig,
    #[serde(default = "desk_sampler")]
    pub sampler: SamplerConfig,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_level() -> f64 {
    0.95
}

/// Two chains of 500 warmup and 500 retained iterations.
pub fn desk_sampler() -> SamplerConfig {
    SamplerConfig { n_chains: 2, n_warmup: 500, n_samples: 500, ..SamplerConfig::default() }
}

impl EngineConfig {
    pub fn desk(n_components: usize) -> Self {
        Self {
            basis: BasisSpec::default(),
            model: ModelConfig::new(n_components),
            sampler: desk_sampler(),
            level: default_level(),
        }
    }
}

/// Accuracy of one estimated component of one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentMetric {
    /// `mu` or `phi1`, `phi2`, ...
    pub component: String,
    pub variable: String,
    pub ise: f64,
    pub coverage: f64,
}

/// Result of one replicate; failures are recorded, not propagated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub error: Option<String>,
    pub rise: Vec<RiseValue>,
    /// Point-wise coverage of the latent trajectories, per variable.
    pub trajectory_coverage: Vec<f64>,
    pub components: Vec<ComponentMetric>,
    pub max_rhat: Option<f64>,
    pub n_rhat_above_threshold: usize,
    pub n_divergent: usize,
    #[serde(skip)]
    pub seconds: f64,
}

impl ReplicateResult {
    fn failed(replicate: usize, error: String, seconds: f64) -> Self {
        Self {
            replicate,
            error: Some(error),
            rise: Vec::new(),
            trajectory_coverage: Vec::new(),
            components: Vec::new(),
            max_rhat: None,
            n_rhat_above_threshold: 0,
            n_divergent: 0,
            seconds,
        }
    }
}

/// Original-scale FPC weights and eigenvalues of one draw: the leading
/// eigenpairs of `D Ψ Λ Ψᵀ D`, with `D` the block-diagonal standard
/// deviations. Returns `(Ψ_orig, λ_orig)`.
pub fn original_scale_fpcs(draws: &PosteriorDraws, psi: &DMatrix<f64>, lambda: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
    let d = draws.context.dims;
    let scaling = &draws.context.scaling;
    let a = DMatrix::from_fn(d.pq(), d.k, |r, c| scaling.variables[r / d.q].sd * psi[(r, c)] * lambda[c].sqrt());
    let svd = a.svd(true, false);
    let u = svd.u.expect("svd u");
    let mut order: Vec<usize> = (0..d.k).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let psi_o = DMatrix::from_fn(d.pq(), d.k, |r, c| u[(r, order[c])]);
    let lambda_o = order.iter().map(|&c| svd.singular_values[c].powi(2)).collect();
    (psi_o, lambda_o)
}

/// Mean-curve and FPC accuracy against the truth, on the original scale.
/// Every draw's FPCs are rotated onto the true ones before summarising.
pub fn component_metrics(
    draws: &PosteriorDraws,
    basis_grid: &DMatrix<f64>,
    truth: &Truth,
    level: f64,
) -> Result<Vec<ComponentMetric>> {
    let d = draws.context.dims;
    let m = truth.grid.len();
    let weights = vec![1.0 / m as f64; m];
    let scaling = &draws.context.scaling;
    let k_true = truth.fpcs.ncols();
    let k = d.k.min(k_true);
    let target = truth.fpcs.columns(0, k).into_owned();
    let projected = project_blocks(basis_grid, &target);
    let mut means: Vec<DMatrix<f64>> = Vec::new();
    let mut fpcs: Vec<DMatrix<f64>> = Vec::new();
    let mut aligned_psi: Vec<DMatrix<f64>> = Vec::new();
    for draw in draws.iter() {
        let mut mu = DMatrix::zeros(d.p, m);
        for p in 0..d.p {
            let vals = basis_grid * draw.w_mu.rows(p * d.q, d.q);
            for j in 0..m {
                mu[(p, j)] = scaling.destandardize_value(p, vals[j]);
            }
        }
        means.push(mu);
        let (psi_o, _) = original_scale_fpcs(draws, &draw.psi, &draw.lambda);
        let psi_k = psi_o.columns(0, k).into_owned();
        let r = procrustes_rotation(&psi_k.tr_mul(&projected));
        let rotated = psi_k * r;
        fpcs.push(evaluate_blocks(basis_grid, &rotated));
        aligned_psi.push(rotated);
    }
    let mut mean_psi = DMatrix::zeros(d.pq(), k);
    for a in &aligned_psi {
        mean_psi += a;
    }
    mean_psi /= aligned_psi.len() as f64;
    let point_fpcs = evaluate_blocks(basis_grid, &orthonormalize_svd(&mean_psi)?);
    let mut out = Vec::new();
    let mut buf = vec![0.0; means.len()];
    let mut summarise = |values: &dyn Fn(usize, usize) -> f64, truth_row: &dyn Fn(usize) -> f64| {
        let mut est = Vec::with_capacity(m);
        let (mut lo, mut hi, mut tr) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
        for j in 0..m {
            for (s, b) in buf.iter_mut().enumerate() {
                *b = values(s, j);
            }
            let iv = Interval::from_samples(&mut buf, level);
            est.push(iv.mean);
            lo.push(iv.lo);
            hi.push(iv.hi);
            tr.push(truth_row(j));
        }
        (est, coverage(&lo, &hi, &tr), tr)
    };
    for p in 0..d.p {
        let (est, cov, tr) = summarise(&|s, j| means[s][(p, j)], &|j| truth.mean[(p, j)]);
        out.push(ComponentMetric {
            component: "mu".into(),
            variable: draws.context.variables[p].clone(),
            ise: component_ise(&est, &tr, &weights),
            coverage: cov,
        });
        for c in 0..k {
            let (_, cov, tr) = summarise(&|s, j| fpcs[s][(p * m + j, c)], &|j| truth.fpcs[(p * m + j, c)]);
            let point: Vec<f64> = (0..m).map(|j| point_fpcs[(p * m + j, c)]).collect();
            out.push(ComponentMetric {
                component: format!("phi{}", c + 1),
                variable: draws.context.variables[p].clone(),
                ise: component_ise(&point, &tr, &weights),
                coverage: cov,
            });
        }
    }
    Ok(out)
}

/// Subject means of the observed values, `[subject][variable]`.
fn subject_baselines(records: &[Record], n: usize, p: usize) -> Vec<Vec<Option<f64>>> {
    let mut sums = vec![vec![(0.0, 0usize); p]; n];
    for r in records {
        let i: usize = r.subject[1..].parse::<usize>().expect("generated subject name") - 1;
        let v: usize = r.variable[1..].parse::<usize>().expect("generated variable name") - 1;
        sums[i][v].0 += r.value;
        sums[i][v].1 += 1;
    }
    sums.into_iter().map(|row| row.into_iter().map(|(s, c)| (c > 0).then(|| s / c as f64)).collect()).collect()
}

/// Fits one replicate and scores it. Returns the draws too so callers can
/// persist them.
pub fn fit_replicate(
    scenario: &Scenario,
    engine: &EngineConfig,
    replicate: usize,
) -> Result<(ReplicateResult, PosteriorDraws)> {
    let (records, truth) = generate(scenario, replicate)?;
    let (data, scaling) = standardize(&records, TimeDomain::Fixed(0.0, 1.0))?;
    let basis = OrthoBasis::from_spec(&engine.basis)?;
    let model = Model::new(data, &basis, engine.model)?;
    let mut sampler_config = engine.sampler;
    sampler_config.seed = stream_seed(scenario.seed, replicate);
    let draws = sampler::run(&sampler_config, &model, engine.basis, scaling)?;
    let result = score_replicate(scenario, engine, replicate, &records, &truth, &draws, &basis)?;
    Ok((result, draws))
}

/// Sampler seed of a replicate, derived from the scenario seed.
pub fn stream_seed(seed: u64, replicate: usize) -> u64 {
    stream(seed, &[tags::REPLICATE, replicate as u64, tags::CHAIN]).random()
}

fn score_replicate(
    scenario: &Scenario,
    engine: &EngineConfig,
    replicate: usize,
    records: &[Record],
    truth: &Truth,
    draws: &PosteriorDraws,
    basis: &OrthoBasis,
) -> Result<ReplicateResult> {
    let d = draws.context.dims;
    let m = truth.grid.len();
    let weights = vec![1.0 / m as f64; m];
    let options = PredictOptions { level: engine.level, ..PredictOptions::default() };
    let mut predicted = Vec::with_capacity(d.n);
    let mut cover = vec![(0usize, 0usize); d.p];
    for i in 0..d.n {
        let summary = subject_summary(draws, basis, i, &truth.grid, &options)?;
        let mut pred = DMatrix::zeros(d.p, m);
        for (p, row) in summary.iter().enumerate() {
            for (j, iv) in row.iter().enumerate() {
                pred[(p, j)] = iv.mean;
                let t = truth.latent[i][(p, j)];
                cover[p].0 += usize::from(iv.lo <= t && t <= iv.hi);
                cover[p].1 += 1;
            }
        }
        predicted.push(pred);
    }
    let baselines = subject_baselines(records, scenario.n_subjects, scenario.n_variables);
    let basis_grid = basis.evaluate(&truth.grid)?;
    let components = component_metrics(draws, &basis_grid, truth, engine.level)?;
    let reference = default_reference(draws, &basis.evaluate(&draws.context.times)?)?;
    let aligned =
        procrustes_align(draws, &basis.evaluate(&draws.context.times)?, &reference, ReferenceSource::PosteriorMean)?;
    let report = if draws.n_chains() >= 2 { Some(alignment_report(draws, &aligned)) } else { None };
    Ok(ReplicateResult {
        replicate,
        error: None,
        rise: rise(&predicted, &truth.latent, &baselines, &weights),
        trajectory_coverage: cover.iter().map(|(h, t)| *h as f64 / *t as f64).collect(),
        components,
        max_rhat: report.as_ref().and_then(|r| r.max_rhat),
        n_rhat_above_threshold: report.as_ref().map_or(0, |r| r.n_rhat_above_threshold),
        n_divergent: draws.n_divergent(),
        seconds: 0.0,
    })
}

/// Full study output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: Scenario,
    pub engine: EngineConfig,
    pub replicates: Vec<ReplicateResult>,
}

/// Mean ISE and coverage of one component across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub component: String,
    pub variable: String,
    pub mean_ise: f64,
    pub mean_coverage: f64,
}

/// Averages across successful replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub n_replicates: usize,
    pub n_failed: usize,
    pub variables: Vec<String>,
    pub mean_rise: Vec<f64>,
    pub max_rise: Vec<f64>,
    pub mean_trajectory_coverage: Vec<f64>,
    pub overall_trajectory_coverage: f64,
    pub components: Vec<ComponentSummary>,
    pub max_rhat: Option<f64>,
    pub n_divergent: usize,
    pub failures: Vec<(usize, String)>,
}

impl StudyReport {
    pub fn successful(&self) -> impl Iterator<Item = &ReplicateResult> {
        self.replicates.iter().filter(|r| r.error.is_none())
    }

    pub fn summary(&self) -> StudySummary {
        let p = self.scenario.n_variables;
        let ok: Vec<&ReplicateResult> = self.successful().collect();
        let avg = |f: &dyn Fn(&ReplicateResult) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
            }
        };
        let mut components = Vec::new();
        if let Some(first) = ok.first() {
            for (idx, c) in first.components.iter().enumerate() {
                components.push(ComponentSummary {
                    component: c.component.clone(),
                    variable: c.variable.clone(),
                    mean_ise: avg(&|r| r.components[idx].ise),
                    mean_coverage: avg(&|r| r.components[idx].coverage),
                });
            }
        }
        StudySummary {
            n_replicates: self.replicates.len(),
            n_failed: self.replicates.len() - ok.len(),
            variables: (0..p).map(variable_name).collect(),
            mean_rise: (0..p).map(|v| avg(&|r| r.rise[v].rise)).collect(),
            max_rise: (0..p).map(|v| ok.iter().map(|r| r.rise[v].rise).fold(f64::NAN, f64::max)).collect(),
            mean_trajectory_coverage: (0..p).map(|v| avg(&|r| r.trajectory_coverage[v])).collect(),
            overall_trajectory_coverage: avg(&|r| r.trajectory_coverage.iter().sum::<f64>() / p as f64),
            components,
            max_rhat: ok.iter().filter_map(|r| r.max_rhat).reduce(f64::max),
            n_divergent: ok.iter().map(|r| r.n_divergent).sum(),
            failures: self
                .replicates
                .iter()
                .filter_map(|r| r.error.as_ref().map(|e| (r.replicate, e.clone())))
                .collect(),
        }
    }
}

/// Runs every replicate (in parallel), recording failures and timings.
/// With `draws_dir`, each replicate's draws are saved to
/// `draws_dir/replicate_NNN`.
pub fn run_study(scenario: &Scenario, engine: &EngineConfig, draws_dir: Option<&Path>) -> Result<StudyReport> {
    scenario.validate()?;
    engine.sampler.validate()?;
    let engine_json = serde_json::to_string(engine)?;
    let replicates = (0..scenario.n_replicates)
        .into_par_iter()
        .map(|b| {
            let start = Instant::now();
            let outcome = fit_replicate(scenario, engine, b).and_then(|(r, draws)| {
                if let Some(dir) = draws_dir {
                    persist::save(&draws, &dir.join(format!("replicate_{b:03}")), &engine_json, BTreeMap::new())?;
                }
                Ok(r)
            });
            match outcome {
                Ok(mut r) => {
                    r.seconds = start.elapsed().as_secs_f64();
                    r
                }
                Err(e) => ReplicateResult::failed(b, e.to_string(), start.elapsed().as_secs_f64()),
            }
        })
        .collect();
    Ok(StudyReport { scenario: scenario.clone(), engine: engine.clone(), replicates })
}

/// JSON schema of `summary.json`.
pub const SUMMARY_SCHEMA: &str = r#"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "Simulation study summary",
  "type": "object",
  "required": ["n_replicates", "n_failed", "variables", "mean_rise", "max_rise",
               "mean_trajectory_coverage", "overall_trajectory_coverage",
               "components", "max_rhat", "n_divergent", "failures"],
  "properties": {
    "n_replicates": {"type": "integer", "minimum": 0},
    "n_failed": {"type": "integer", "minimum": 0},
    "variables": {"type": "array", "items": {"type": "string"}},
    "mean_rise": {"type": "array", "items": {"type": ["number", "null"]}},
    "max_rise": {"type": "array", "items": {"type": ["number", "null"]}},
    "mean_trajectory_coverage": {"type": "array", "items": {"type": ["number", "null"]}},
    "overall_trajectory_coverage": {"type": ["number", "null"]},
    "components": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["component", "variable", "mean_ise", "mean_coverage"],
        "properties": {
          "component": {"type": "string"},
          "variable": {"type": "string"},
          "mean_ise": {"type": ["number", "null"]},
          "mean_coverage": {"type": ["number", "null"]}
        }
      }
    },
    "max_rhat": {"type": ["number", "null"]},
    "n_divergent": {"type": "integer", "minimum": 0},
    "failures": {"type": "array", "items": {"type": "array"}}
  }
}
"#;

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Writes `rise.csv`, `ise_components.csv`, `coverage.csv`, `timing.csv`,
/// `summary.json` and `summary.schema.json` into `dir`.
pub fn write_report(report: &StudyReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let names: Vec<String> = (0..report.scenario.n_variables).map(variable_name).collect();
    let mut w = csv::Writer::from_writer(create(&dir.join("rise.csv"))?);
    w.write_record(["replicate", "variable", "rise", "n_excluded"])?;
    for r in report.successful() {
        for (v, x) in r.rise.iter().enumerate() {
            w.write_record([r.replicate.to_string(), names[v].clone(), x.rise.to_string(), x.n_excluded.to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&dir.join("ise_components.csv"))?);
    w.write_record(["replicate", "component", "variable", "ise"])?;
    for r in report.successful() {
        for c in &r.components {
            w.write_record([r.replicate.to_string(), c.component.clone(), c.variable.clone(), c.ise.to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&dir.join("coverage.csv"))?);
    w.write_record(["replicate", "target", "variable", "coverage"])?;
    for r in report.successful() {
        for (v, c) in r.trajectory_coverage.iter().enumerate() {
            w.write_record([r.replicate.to_string(), "trajectory".into(), names[v].clone(), c.to_string()])?;
        }
        for c in &r.components {
            w.write_record([r.replicate.to_string(), c.component.clone(), c.variable.clone(), c.coverage.to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&dir.join("timing.csv"))?);
    w.write_record(["replicate", "n_subjects", "seconds", "status"])?;
    for r in &report.replicates {
        w.write_record([
            r.replicate.to_string(),
            report.scenario.n_subjects.to_string(),
            format!("{:.3}", r.seconds),
            if r.error.is_some() { "failed".into() } else { "ok".to_string() },
        ])?;
    }
    w.flush()?;
    let mut f = create(&dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &report.summary())?;
    writeln!(f)?;
    f.flush()?;
    std::fs::write(dir.join("summary.schema.json"), SUMMARY_SCHEMA)?;
    Ok(())
}

/// One timing measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n_subjects: usize,
    pub seconds: f64,
}

/// Fits the first replicate of `scenario` once per subject count and
/// records the wall-clock time of the fit.
pub fn run_timing(scenario: &Scenario, engine: &EngineConfig, sizes: &[usize]) -> Result<Vec<TimingRow>> {
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let sc = Scenario { n_subjects: n, ..scenario.clone() };
        let (records, _) = generate(&sc, 0)?;
        let (data, scaling) = standardize(&records, TimeDomain::Fixed(0.0, 1.0))?;
        let basis = OrthoBasis::from_spec(&engine.basis)?;
        let model = Model::new(data, &basis, engine.model)?;
        let start = Instant::now();
        sampler::run(&engine.sampler, &model, engine.basis, scaling)?;
        out.push(TimingRow { n_subjects: n, seconds: start.elapsed().as_secs_f64() });
    }
    Ok(out)
}

pub fn write_timing_csv<W: Write>(rows: &[TimingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n_subjects", "seconds"])?;
    for r in rows {
        w.write_record([r.n_subjects.to_string(), format!("{:.3}", r.seconds)])?;
    }
    w.flush()?;
    Ok(())
}

/// Scores an external method through a subprocess contract.
///
/// The command is run with three extra arguments: an input CSV of the
/// observations (`subject,variable,time,value`), a CSV of requested grid
/// times (`time`), and the output path. It must write
/// `subject,variable,time,mean,lo95,hi95` rows for every subject, variable
/// and grid time; `lo95`/`hi95` may be empty when intervals are not
/// produced, in which case coverage is `NaN`.
pub fn run_comparator(
    command: &[String],
    scenario: &Scenario,
    replicate: usize,
    workdir: &Path,
) -> Result<(Vec<RiseValue>, Vec<f64>)> {
    let (program, args) = command.split_first().ok_or_else(|| Error::Config("empty comparator command".into()))?;
    let (records, truth) = generate(scenario, replicate)?;
    std::fs::create_dir_all(workdir)?;
    let input = workdir.join(format!("comparator_input_{replicate}.csv"));
    let grid_path = workdir.join(format!("comparator_grid_{replicate}.csv"));
    let output = workdir.join(format!("comparator_output_{replicate}.csv"));
    let mut w = csv::Writer::from_writer(create(&input)?);
    w.write_record(["subject", "variable", "time", "value"])?;
    for r in &records {
        w.write_record([r.subject.clone(), r.variable.clone(), r.time.to_string(), r.value.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create(&grid_path)?);
    w.write_record(["time"])?;
    for t in &truth.grid {
        w.write_record([t.to_string()])?;
    }
    w.flush()?;
    let status = Command::new(program).args(args).arg(&input).arg(&grid_path).arg(&output).status()?;
    if !status.success() {
        return Err(Error::Data(format!("comparator exited with {status}")));
    }
    let (n, p, m) = (scenario.n_subjects, scenario.n_variables, truth.grid.len());
    let mut mean = vec![DMatrix::from_element(p, m, f64::NAN); n];
    let mut lo = vec![DMatrix::from_element(p, m, f64::NAN); n];
    let mut hi = vec![DMatrix::from_element(p, m, f64::NAN); n];
    let mut reader = csv::Reader::from_path(&output)?;
    for row in reader.records() {
        let row = row?;
        let field = |c: usize| row.get(c).unwrap_or("").trim().to_string();
        let i = field(0).get(1..).and_then(|s| s.parse::<usize>().ok()).filter(|i| (1..=n).contains(i));
        let v = field(1).get(1..).and_then(|s| s.parse::<usize>().ok()).filter(|v| (1..=p).contains(v));
        let t: Option<f64> = field(2).parse().ok();
        let j = t.and_then(|t| truth.grid.iter().position(|g| (g - t).abs() < 1e-9));
        let (Some(i), Some(v), Some(j)) = (i, v, j) else {
            return Err(Error::Format(format!("unrecognised comparator row {row:?}")));
        };
        let num = |c: usize| field(c).parse::<f64>().unwrap_or(f64::NAN);
        mean[i - 1][(v - 1, j)] = num(3);
        lo[i - 1][(v - 1, j)] = num(4);
        hi[i - 1][(v - 1, j)] = num(5);
    }
    if mean.iter().any(|m| m.iter().any(|x| !x.is_finite())) {
        return Err(Error::Format("comparator output misses some subject, variable or time".into()));
    }
    let weights = vec![1.0 / m as f64; m];
    let baselines = subject_baselines(&records, n, p);
    let rises = rise(&mean, &truth.latent, &baselines, &weights);
    let cov = (0..p)
        .map(|v| {
            let flat = |x: &[DMatrix<f64>]| -> Vec<f64> {
                x.iter().flat_map(|s| s.row(v).iter().copied().collect::<Vec<_>>()).collect()
            };
            let (l, h) = (flat(&lo), flat(&hi));
            if l.iter().chain(&h).any(|x| x.is_nan()) {
                f64::NAN
            } else {
                coverage(&l, &h, &flat(&truth.latent))
            }
        })
        .collect();
    Ok((rises, cov))
}

/// Empirical score variances of a truth, for generator checks.
pub fn score_variances(truth: &Truth) -> DVector<f64> {
    let n = truth.scores.nrows() as f64;
    DVector::from_iterator(truth.scores.ncols(), truth.scores.column_iter().map(|c| c.norm_squared() / n))
}
