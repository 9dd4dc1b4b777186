//! Trajectory prediction from posterior draws.
//!
//! Static prediction reconstructs `[I ⊗ B(t)](w_μ + Ψ ξ_i)` for fitted
//! subjects at arbitrary times inside the fitted range. Dynamic prediction
//! handles a new (or partially observed) subject by drawing its scores from
//! their conditional Gaussian given each posterior draw of the population
//! parameters, so no refit is needed when data arrive.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::OrthoBasis;
use crate::error::{Error, Result};
use crate::linalg::sample_mvn;
use crate::postprocess::Interval;
use crate::rng::{stream, tags};
use crate::sampler::gibbs::conditional_scores;
use crate::sampler::{Draw, PosteriorDraws};
use crate::stats::std_normal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Credible level of the equal-tail intervals.
    pub level: f64,
    /// Add observation noise so intervals cover new measurements rather
    /// than the latent smooth trajectory.
    pub with_noise: bool,
    /// Seed for score sampling and noise.
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { level: 0.95, with_noise: false, seed: 1 }
    }
}

/// One line of the prediction table, in original units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub subject: String,
    pub variable: String,
    pub time: f64,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Observation of a new subject in original units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewObservation {
    pub variable: usize,
    pub time: f64,
    pub value: f64,
}

/// Latent values of one draw at the basis rows `bt` (`T × Q`), as a
/// `P × T` matrix in original units.
pub fn reconstruct(draws: &PosteriorDraws, draw: &Draw, xi: &DVector<f64>, bt: &DMatrix<f64>) -> DMatrix<f64> {
    let d = draws.context.dims;
    let scaling = &draws.context.scaling;
    let coef = &draw.w_mu + &draw.psi * xi;
    let mut out = DMatrix::zeros(d.p, bt.nrows());
    for p in 0..d.p {
        let vals = bt * coef.rows(p * d.q, d.q);
        for (t, v) in vals.iter().enumerate() {
            out[(p, t)] = scaling.destandardize_value(p, *v);
        }
    }
    out
}

/// Converts original-unit times to unit time, rejecting extrapolation.
fn unit_times(draws: &PosteriorDraws, times: &[f64]) -> Result<Vec<f64>> {
    times.iter().map(|&t| draws.context.scaling.unit_time_checked(t)).collect()
}

/// Pointwise summaries over draws of per-draw `P × T` trajectories.
/// `noise` adds `N(0, σ²_p)` (original scale) to each draw's values.
fn summarize_trajectories<R: Rng>(
    draws: &PosteriorDraws,
    trajectories: Vec<DMatrix<f64>>,
    options: &PredictOptions,
    rng: &mut R,
) -> Vec<Vec<Interval>> {
    let d = draws.context.dims;
    let scaling = &draws.context.scaling;
    let n_t = trajectories.first().map_or(0, |m| m.ncols());
    let mut values = trajectories;
    if options.with_noise {
        for (traj, draw) in values.iter_mut().zip(draws.iter()) {
            for p in 0..d.p {
                let sd = scaling.destandardize_noise_sd(p, draw.sigma2[p].sqrt());
                for t in 0..n_t {
                    traj[(p, t)] += sd * std_normal(rng);
                }
            }
        }
    }
    let mut buf = vec![0.0; values.len()];
    (0..d.p)
        .map(|p| {
            (0..n_t)
                .map(|t| {
                    for (b, v) in buf.iter_mut().zip(&values) {
                        *b = v[(p, t)];
                    }
                    Interval::from_samples(&mut buf, options.level)
                })
                .collect()
        })
        .collect()
}

fn rows_for(draws: &PosteriorDraws, subject: &str, times: &[f64], summaries: &[Vec<Interval>]) -> Vec<PredictionRow> {
    let mut rows = Vec::with_capacity(summaries.len() * times.len());
    for (p, per_t) in summaries.iter().enumerate() {
        for (t, iv) in per_t.iter().enumerate() {
            rows.push(PredictionRow {
                subject: subject.to_string(),
                variable: draws.context.variables[p].clone(),
                time: times[t],
                mean: iv.mean,
                lo95: iv.lo,
                hi95: iv.hi,
            });
        }
    }
    rows
}

/// Pointwise summaries of a fitted subject's latent trajectories, indexed
/// `[variable][time]`. `times` are in original units.
pub fn subject_summary(
    draws: &PosteriorDraws,
    basis: &OrthoBasis,
    subject: usize,
    times: &[f64],
    options: &PredictOptions,
) -> Result<Vec<Vec<Interval>>> {
    if subject >= draws.context.dims.n {
        return Err(Error::Data(format!("subject index {subject} is not in the fit")));
    }
    let bt = basis.evaluate(&unit_times(draws, times)?)?;
    let trajectories: Vec<DMatrix<f64>> =
        draws.iter().map(|draw| reconstruct(draws, draw, &draw.scores.row(subject).transpose(), &bt)).collect();
    let mut rng = stream(options.seed, &[tags::PREDICT, tags::SUBJECT, subject as u64]);
    Ok(summarize_trajectories(draws, trajectories, options, &mut rng))
}

/// Static prediction for fitted subjects (by name) at `times` (original
/// units). Subjects are processed in parallel and streamed into rows.
pub fn static_predict(
    draws: &PosteriorDraws,
    basis: &OrthoBasis,
    subjects: &[String],
    times: &[f64],
    options: &PredictOptions,
) -> Result<Vec<PredictionRow>> {
    unit_times(draws, times)?;
    let index: Vec<usize> = subjects
        .iter()
        .map(|s| {
            draws
                .context
                .subjects
                .iter()
                .position(|x| x == s)
                .ok_or_else(|| Error::Data(format!("subject {s:?} is not in the fit")))
        })
        .collect::<Result<_>>()?;
    let per_subject: Vec<Vec<PredictionRow>> = index
        .par_iter()
        .zip(subjects)
        .map(|(&i, name)| Ok(rows_for(draws, name, times, &subject_summary(draws, basis, i, times, options)?)))
        .collect::<Result<_>>()?;
    Ok(per_subject.into_iter().flatten().collect())
}

/// Draws a new subject's scores once per posterior draw from the Gaussian
/// conditional on that draw's mean, FPCs, noise variances and eigenvalues.
/// With no observations the draws come from `N(0, Λ)`.
pub fn conditional_score_sample(
    observations: &[NewObservation],
    draws: &PosteriorDraws,
    basis: &OrthoBasis,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let d = draws.context.dims;
    let scaling = &draws.context.scaling;
    // Per-variable standardised values and basis rows.
    let mut per_var: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(d.p);
    for p in 0..d.p {
        let obs: Vec<&NewObservation> = observations.iter().filter(|o| o.variable == p).collect();
        let t: Vec<f64> = obs.iter().map(|o| scaling.unit_time_checked(o.time)).collect::<Result<_>>()?;
        let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| scaling.standardize_value(p, o.value)));
        per_var.push((basis.evaluate(&t)?, y));
    }
    if let Some(o) = observations.iter().find(|o| o.variable >= d.p || !o.value.is_finite()) {
        return Err(Error::Data(format!("invalid new observation {o:?}")));
    }
    let all: Vec<&Draw> = draws.iter().collect();
    all.par_iter()
        .enumerate()
        .map(|(n, draw)| {
            let blocks: Vec<(DMatrix<f64>, DVector<f64>, f64)> = per_var
                .iter()
                .enumerate()
                .filter(|(_, (bt, _))| bt.nrows() > 0)
                .map(|(p, (bt, y))| {
                    let phi = bt * draw.psi.rows(p * d.q, d.q);
                    let resid = y - bt * draw.w_mu.rows(p * d.q, d.q);
                    (phi, resid, draw.sigma2[p])
                })
                .collect();
            let (mean, cov) = conditional_scores(&blocks, &draw.lambda)?;
            let mut rng = stream(seed, &[tags::PREDICT, tags::SCORES, n as u64]);
            sample_mvn(&mean, &cov, &mut rng)
        })
        .collect()
}

/// Dynamic prediction for a new subject using only observations at or
/// before `cutoff`, over the window `[first observation, cutoff + horizon]`.
///
/// When `times` is `None` the window is evaluated at the fitted times that
/// fall inside it plus both window ends.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_predict(
    draws: &PosteriorDraws,
    basis: &OrthoBasis,
    subject: &str,
    observations: &[NewObservation],
    cutoff: f64,
    horizon: f64,
    times: Option<&[f64]>,
    options: &PredictOptions,
) -> Result<Vec<PredictionRow>> {
    if !(horizon >= 0.0) || !cutoff.is_finite() {
        return Err(Error::Domain(format!("invalid cutoff {cutoff} or horizon {horizon}")));
    }
    let used: Vec<NewObservation> = observations.iter().copied().filter(|o| o.time <= cutoff).collect();
    let start = used
        .iter()
        .map(|o| o.time)
        .fold(None, |a: Option<f64>, t| Some(a.map_or(t, |a| a.min(t))))
        .ok_or_else(|| Error::Domain(format!("no observations at or before cutoff {cutoff}")))?;
    let end = cutoff + horizon;
    let scaling = &draws.context.scaling;
    scaling.unit_time_checked(end)?;
    let grid: Vec<f64> = match times {
        Some(t) => {
            if let Some(bad) = t.iter().find(|&&x| x < start || x > end) {
                return Err(Error::Domain(format!("time {bad} lies outside the window [{start}, {end}]")));
            }
            t.to_vec()
        }
        None => {
            let mut g = vec![start];
            g.extend(
                draws.context.times.iter().map(|&s| scaling.to_original_time(s)).filter(|&t| t > start && t < end),
            );
            if end > start {
                g.push(end);
            }
            g
        }
    };
    let scores = conditional_score_sample(&used, draws, basis, options.seed)?;
    let bt = basis.evaluate(&unit_times(draws, &grid)?)?;
    let trajectories: Vec<DMatrix<f64>> =
        draws.iter().zip(&scores).map(|(draw, xi)| reconstruct(draws, draw, xi, &bt)).collect();
    let mut rng = stream(options.seed, &[tags::PREDICT, tags::SUBJECT, u64::MAX]);
    let summaries = summarize_trajectories(draws, trajectories, options, &mut rng);
    Ok(rows_for(draws, subject, &grid, &summaries))
}

/// Writes the prediction table; an empty slice gives a header-only file.
pub fn write_predictions_csv<W: Write>(rows: &[PredictionRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject", "variable", "time", "mean", "lo95", "hi95"])?;
    for r in rows {
        w.write_record([
            r.subject.clone(),
            r.variable.clone(),
            r.time.to_string(),
            r.mean.to_string(),
            r.lo95.to_string(),
            r.hi95.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
