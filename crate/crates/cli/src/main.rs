//! `sfpca`: fit, align, predict and simulate from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure, 4 fit completed but convergence was flagged.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sparse_fpca::basis::{BasisSpec, OrthoBasis};
use sparse_fpca::data::{read_long_csv_path, standardize, ColumnSpec, TimeDomain};
use sparse_fpca::persist::{self, sha256_file};
use sparse_fpca::posterior::{Model, ModelConfig};
use sparse_fpca::postprocess::{
    alignment_report, default_reference, evaluate_blocks, fpc_intervals, posterior_fpc_estimate, procrustes_align,
    variance_explained, AlignedDraws, AlignmentReport, Interval, ReferenceSource,
};
use sparse_fpca::predict::{dynamic_predict, static_predict, write_predictions_csv, NewObservation, PredictOptions};
use sparse_fpca::sampler::{self, PosteriorDraws, SamplerConfig};
use sparse_fpca::simharness::{
    run_comparator, run_study, run_timing, write_report, write_timing_csv, EngineConfig, Scenario,
};
use sparse_fpca::{Error, ErrorKind};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CONVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "sfpca", version, about = "Bayesian functional PCA for sparse multivariate longitudinal data")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SFPCA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a long-format CSV.
    Fit(FitArgs),
    /// Align saved draws and report convergence and FPC estimates.
    Align(AlignArgs),
    /// Predict trajectories of fitted subjects.
    Predict(PredictArgs),
    /// Predict trajectories of new subjects from their early observations.
    DynamicPredict(DynamicArgs),
    /// Run a simulation study.
    Simulate(SimulateArgs),
    /// Write the variance-explained table and a fit summary.
    Report(ReportArgs),
    /// Write the orthonormal basis evaluated on a grid.
    ExportBasis(ExportBasisArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Long-format CSV with subject, variable, time and value columns.
    #[arg(long)]
    data: PathBuf,
    /// JSON configuration; `model.n_components` is required.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    draws: PathBuf,
    /// CSV reference FPCs with columns variable,time,phi1..phiK on the
    /// fitted times; defaults to the posterior-mean reference.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subject names (default: all fitted subjects).
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<String>>,
    /// Comma-separated prediction times in original units (default: the
    /// fitted times). An empty value gives an empty table.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    times: Option<Vec<String>>,
    /// Add observation noise to the intervals.
    #[arg(long)]
    with_noise: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct DynamicArgs {
    #[arg(long)]
    draws: PathBuf,
    /// Long-format CSV of new observations.
    #[arg(long)]
    new: PathBuf,
    /// Only observations at or before this time are used.
    #[arg(long)]
    cutoff: f64,
    /// How far past the cutoff to predict.
    #[arg(long, default_value_t = 0.0)]
    horizon: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    with_noise: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON with a `scenario` object and an optional `engine` object.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Timing mode: comma-separated subject counts to fit once each.
    #[arg(long, value_delimiter = ',')]
    timing: Option<Vec<usize>>,
    /// Also save every replicate's draws under `out/draws`.
    #[arg(long)]
    save_draws: bool,
    /// External method to score through the CSV subprocess contract.
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    comparator: Option<Vec<String>>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Truncation levels (default: 1..=K).
    #[arg(long, value_delimiter = ',')]
    truncations: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
}

#[derive(Args)]
struct ExportBasisArgs {
    /// Optional JSON basis specification (`dim`, `degree`, `nodes_per_span`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of equally spaced points on [0, 1].
    #[arg(long, default_value_t = 101)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Fit configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    model: ModelConfig,
    #[serde(default)]
    basis: BasisSpec,
    #[serde(default)]
    sampler: SamplerConfig,
    #[serde(default)]
    columns: ColumnSpec,
    #[serde(default)]
    time_domain: TimeDomain,
}

/// Simulation study file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyFile {
    #[serde(default)]
    scenario: Scenario,
    engine: Option<EngineConfig>,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>().map(Error::kind) {
            Some(ErrorKind::Data) => EXIT_DATA,
            Some(ErrorKind::Numerical) => EXIT_NUMERICAL,
            Some(ErrorKind::Config) | None => EXIT_USAGE,
        };
        Self { code, error }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        anyhow::Error::from(error).into()
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Align(a) => cmd_align(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::DynamicPredict(a) => cmd_dynamic(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Report(a) => cmd_report(&a),
        Command::ExportBasis(a) => cmd_export_basis(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure { code: EXIT_USAGE, error: anyhow!("invalid configuration {}: {e}", path.display()) })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut f = std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn load_draws(dir: &Path) -> Result<(PosteriorDraws, OrthoBasis), Failure> {
    let (draws, _) = persist::load(dir).with_context(|| format!("cannot load draws from {}", dir.display()))?;
    let basis = OrthoBasis::from_spec(&draws.context.basis)?;
    Ok((draws, basis))
}

fn align_default(draws: &PosteriorDraws, basis: &OrthoBasis) -> Result<AlignedDraws, Failure> {
    let bt = basis.evaluate(&draws.context.times)?;
    let reference = default_reference(draws, &bt)?;
    Ok(procrustes_align(draws, &bt, &reference, ReferenceSource::PosteriorMean)?)
}

fn warn_report(report: &AlignmentReport) -> bool {
    let mut flagged = false;
    if report.n_rhat_above_threshold > 0 {
        eprintln!(
            "warning: {} parameters have split R-hat above {} (max {:.3})",
            report.n_rhat_above_threshold,
            report.rhat_threshold,
            report.max_rhat.unwrap_or(f64::NAN)
        );
        flagged = true;
    }
    if report.divergence_flagged {
        eprintln!("warning: {:.1}% of transitions diverged", 100.0 * report.divergence_fraction);
        flagged = true;
    }
    if report.reference_rank_deficient {
        eprintln!("warning: alignment reference has rank below K");
    }
    flagged
}

fn cmd_fit(a: &FitArgs) -> CmdResult {
    let config: FitConfig = read_json(&a.config)?;
    config.sampler.validate()?;
    let records =
        read_long_csv_path(&a.data, &config.columns).with_context(|| format!("reading {}", a.data.display()))?;
    let (data, scaling) = standardize(&records, config.time_domain)?;
    let basis = OrthoBasis::from_spec(&config.basis)?;
    let model = Model::new(data, &basis, config.model)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let effective = serde_json::to_string_pretty(&config).map_err(anyhow::Error::from)?;
    std::fs::write(a.out.join("effective_config.json"), format!("{effective}\n")).context("cannot write config")?;
    let draws = sampler::run(&config.sampler, &model, config.basis, scaling)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("data".to_string(), sha256_file(&a.data)?);
    persist::save(&draws, &a.out, &effective, inputs)?;
    write_json(&a.out.join("data_summary.json"), &model.data().summary())?;
    let flagged = if draws.n_chains() >= 2 && draws.n_per_chain() >= 4 {
        let aligned = align_default(&draws, &basis)?;
        let report = alignment_report(&draws, &aligned);
        write_json(&a.out.join("alignment_report.json"), &report)?;
        warn_report(&report)
    } else {
        eprintln!("note: R-hat needs at least two chains of four draws; convergence report skipped");
        if draws.divergence_flagged() {
            eprintln!("warning: {:.1}% of transitions diverged", 100.0 * draws.divergence_fraction());
        }
        draws.divergence_flagged()
    };
    Ok(if flagged { EXIT_CONVERGENCE } else { 0 })
}

/// Reads an external reference: rows variable-major in the fitted order.
fn read_reference(path: &Path, draws: &PosteriorDraws) -> Result<nalgebra::DMatrix<f64>, Failure> {
    let ctx = &draws.context;
    let (m, k) = (ctx.times.len(), ctx.dims.k);
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(anyhow::Error::from)?;
        if rec.len() != k + 2 {
            return Err(Error::Shape(format!("reference rows need {} columns", k + 2)).into());
        }
        rows.push(rec);
    }
    if rows.len() != ctx.dims.p * m {
        return Err(Error::Shape(format!("reference needs {} rows, found {}", ctx.dims.p * m, rows.len())).into());
    }
    let mut out = nalgebra::DMatrix::zeros(rows.len(), k);
    for (r, rec) in rows.iter().enumerate() {
        let (p, j) = (r / m, r % m);
        let time: f64 =
            rec[1].trim().parse().map_err(|_| Error::Format(format!("reference row {}: bad time", r + 2)))?;
        let expect = ctx.scaling.to_original_time(ctx.times[j]);
        if rec[0].trim() != ctx.variables[p] || (time - expect).abs() > 1e-9 * expect.abs().max(1.0) {
            return Err(Error::Data(format!(
                "reference row {} should be variable {} at time {expect}",
                r + 2,
                ctx.variables[p]
            ))
            .into());
        }
        for c in 0..k {
            out[(r, c)] =
                rec[c + 2].trim().parse().map_err(|_| Error::Format(format!("reference row {}: bad value", r + 2)))?;
        }
    }
    Ok(out)
}

fn cmd_align(a: &AlignArgs) -> CmdResult {
    let (draws, basis) = load_draws(&a.draws)?;
    let bt = basis.evaluate(&draws.context.times)?;
    let aligned = match &a.reference {
        Some(path) => {
            let reference = read_reference(path, &draws)?;
            let name = path.file_name().map_or("reference".into(), |n| n.to_string_lossy().into_owned());
            procrustes_align(&draws, &bt, &reference, ReferenceSource::External(name))?
        }
        None => align_default(&draws, &basis)?,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let ctx = &draws.context;
    let time_of = |j: usize| ctx.scaling.to_original_time(ctx.times[j]);
    let mut w = csv::Writer::from_writer(create(&a.out.join("fpc_estimate.csv"))?);
    w.write_record(["time", "variable", "k", "mean", "lo", "hi"]).map_err(anyhow::Error::from)?;
    for (p, j, k, iv) in fpc_intervals(&aligned, &bt, a.level) {
        w.write_record([
            time_of(j).to_string(),
            ctx.variables[p].clone(),
            (k + 1).to_string(),
            iv.mean.to_string(),
            iv.lo.to_string(),
            iv.hi.to_string(),
        ])
        .map_err(anyhow::Error::from)?;
    }
    w.flush().map_err(anyhow::Error::from)?;
    let point = evaluate_blocks(&bt, &posterior_fpc_estimate(&aligned)?);
    let m = ctx.times.len();
    let mut w = csv::Writer::from_writer(create(&a.out.join("fpc_point.csv"))?);
    w.write_record(["time", "variable", "k", "value"]).map_err(anyhow::Error::from)?;
    for r in 0..point.nrows() {
        for k in 0..point.ncols() {
            w.write_record([
                time_of(r % m).to_string(),
                ctx.variables[r / m].clone(),
                (k + 1).to_string(),
                point[(r, k)].to_string(),
            ])
            .map_err(anyhow::Error::from)?;
        }
    }
    w.flush().map_err(anyhow::Error::from)?;
    let mut w = csv::Writer::from_writer(create(&a.out.join("aligned_scores.csv"))?);
    w.write_record(["subject", "k", "mean", "lo", "hi"]).map_err(anyhow::Error::from)?;
    let mut buf = vec![0.0; aligned.scores.len()];
    for (i, name) in ctx.subjects.iter().enumerate() {
        for k in 0..ctx.dims.k {
            for (b, s) in buf.iter_mut().zip(&aligned.scores) {
                *b = s[(i, k)];
            }
            let iv = Interval::from_samples(&mut buf, a.level);
            w.write_record([
                name.clone(),
                (k + 1).to_string(),
                iv.mean.to_string(),
                iv.lo.to_string(),
                iv.hi.to_string(),
            ])
            .map_err(anyhow::Error::from)?;
        }
    }
    w.flush().map_err(anyhow::Error::from)?;
    if draws.n_chains() >= 2 && draws.n_per_chain() >= 4 {
        let report = alignment_report(&draws, &aligned);
        write_json(&a.out.join("alignment_report.json"), &report)?;
        warn_report(&report);
    } else {
        eprintln!("note: R-hat needs at least two chains of four draws; convergence report skipped");
    }
    Ok(0)
}

/// Parses target times, dropping duplicates with a warning.
fn parse_times(raw: &[String]) -> anyhow::Result<Vec<f64>> {
    let mut out: Vec<f64> = Vec::new();
    for s in raw.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let t: f64 = s.parse().map_err(|_| anyhow!("invalid time {s:?}"))?;
        if out.contains(&t) {
            eprintln!("warning: duplicate target time {t} ignored");
        } else {
            out.push(t);
        }
    }
    Ok(out)
}

fn cmd_predict(a: &PredictArgs) -> CmdResult {
    let (draws, basis) = load_draws(&a.draws)?;
    let ctx = &draws.context;
    let subjects = a.subjects.clone().unwrap_or_else(|| ctx.subjects.clone());
    let requested = match &a.times {
        Some(raw) => parse_times(raw)?,
        None => ctx.times.iter().map(|&s| ctx.scaling.to_original_time(s)).collect(),
    };
    let (times, rejected): (Vec<f64>, Vec<f64>) =
        requested.into_iter().partition(|&t| ctx.scaling.unit_time_checked(t).is_ok());
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let options = PredictOptions { level: a.level, with_noise: a.with_noise, seed: a.seed };
    let rows = static_predict(&draws, &basis, &subjects, &times, &options)?;
    write_predictions_csv(&rows, create(&a.out.join("predictions.csv"))?)?;
    if !rejected.is_empty() {
        let mut w = csv::Writer::from_writer(create(&a.out.join("rejected_times.csv"))?);
        w.write_record(["time", "reason"]).map_err(anyhow::Error::from)?;
        for t in &rejected {
            eprintln!("warning: time {t} lies outside the fitted range and was skipped");
            w.write_record([t.to_string(), format!("outside [{}, {}]", ctx.scaling.t_min, ctx.scaling.t_max)])
                .map_err(anyhow::Error::from)?;
        }
        w.flush().map_err(anyhow::Error::from)?;
    }
    Ok(0)
}

fn cmd_dynamic(a: &DynamicArgs) -> CmdResult {
    let (draws, basis) = load_draws(&a.draws)?;
    let ctx = &draws.context;
    let records =
        read_long_csv_path(&a.new, &ColumnSpec::default()).with_context(|| format!("reading {}", a.new.display()))?;
    let mut by_subject: BTreeMap<String, Vec<NewObservation>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in &records {
        let variable = ctx
            .variables
            .iter()
            .position(|v| v == &r.variable)
            .ok_or_else(|| Error::Data(format!("variable {:?} was not in the fit", r.variable)))?;
        if !by_subject.contains_key(&r.subject) {
            order.push(r.subject.clone());
        }
        by_subject.entry(r.subject.clone()).or_default().push(NewObservation {
            variable,
            time: r.time,
            value: r.value,
        });
    }
    let options = PredictOptions { level: a.level, with_noise: a.with_noise, seed: a.seed };
    let mut rows = Vec::new();
    for subject in &order {
        rows.extend(dynamic_predict(
            &draws,
            &basis,
            subject,
            &by_subject[subject],
            a.cutoff,
            a.horizon,
            None,
            &options,
        )?);
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_predictions_csv(&rows, create(&a.out.join("dynamic_predictions.csv"))?)?;
    Ok(0)
}

fn cmd_simulate(a: &SimulateArgs) -> CmdResult {
    let study: StudyFile = read_json(&a.scenario)?;
    let engine = study.engine.clone().unwrap_or_else(|| EngineConfig::desk(study.scenario.eigenvalues.len()));
    study.scenario.validate()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_json(
        &a.out.join("effective_scenario.json"),
        &StudyFile { scenario: study.scenario.clone(), engine: Some(engine.clone()) },
    )?;
    if let Some(sizes) = &a.timing {
        let rows = run_timing(&study.scenario, &engine, sizes)?;
        write_timing_csv(&rows, create(&a.out.join("timing_scaling.csv"))?)?;
        return Ok(0);
    }
    if let Some(cmd) = &a.comparator {
        let dir = a.out.join("comparator");
        let mut w = csv::Writer::from_writer(create(&a.out.join("comparator.csv"))?);
        w.write_record(["replicate", "variable", "rise", "coverage"]).map_err(anyhow::Error::from)?;
        for b in 0..study.scenario.n_replicates {
            let (rise, cov) = run_comparator(cmd, &study.scenario, b, &dir)?;
            for (v, (r, c)) in rise.iter().zip(&cov).enumerate() {
                w.write_record([b.to_string(), format!("y{}", v + 1), r.rise.to_string(), c.to_string()])
                    .map_err(anyhow::Error::from)?;
            }
        }
        w.flush().map_err(anyhow::Error::from)?;
        return Ok(0);
    }
    let draws_dir = a.out.join("draws");
    let report = run_study(&study.scenario, &engine, a.save_draws.then_some(draws_dir.as_path()))?;
    write_report(&report, &a.out)?;
    let summary = report.summary();
    for (r, e) in &summary.failures {
        eprintln!("warning: replicate {r} failed: {e}");
    }
    if summary.n_failed == summary.n_replicates && summary.n_replicates > 0 {
        bail_code(EXIT_NUMERICAL, "every replicate failed")?;
    }
    Ok(0)
}

fn bail_code(code: u8, msg: &str) -> Result<(), Failure> {
    Err(Failure { code, error: anyhow!(msg.to_string()) })
}

#[derive(Serialize)]
struct FitReport<'a> {
    dims: sparse_fpca::posterior::Dims,
    variables: &'a [String],
    n_chains: usize,
    n_per_chain: usize,
    n_divergent: usize,
    divergence_fraction: f64,
    mean_accept_prob: f64,
    max_rhat: Option<f64>,
    n_rhat_above_threshold: usize,
    variance_explained_formula: &'static str,
}

fn cmd_report(a: &ReportArgs) -> CmdResult {
    let (draws, basis) = load_draws(&a.draws)?;
    let ctx = &draws.context;
    let truncations = a.truncations.clone().unwrap_or_else(|| (1..=ctx.dims.k).collect());
    let table = variance_explained(&draws, &truncations, a.level)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut w = csv::Writer::from_writer(create(&a.out.join("variance_explained.csv"))?);
    let mut header = vec!["k".to_string(), "global_mean".into(), "global_lo".into(), "global_hi".into()];
    for v in &ctx.variables {
        for kind in ["share", "within"] {
            for stat in ["mean", "lo", "hi"] {
                header.push(format!("{v}_{kind}_{stat}"));
            }
        }
    }
    w.write_record(&header).map_err(anyhow::Error::from)?;
    for row in &table {
        let mut rec =
            vec![row.k.to_string(), row.global.mean.to_string(), row.global.lo.to_string(), row.global.hi.to_string()];
        for (share, within) in row.per_variable.iter().zip(&row.within_variable) {
            for iv in [share, within] {
                rec.extend([iv.mean.to_string(), iv.lo.to_string(), iv.hi.to_string()]);
            }
        }
        w.write_record(&rec).map_err(anyhow::Error::from)?;
    }
    w.flush().map_err(anyhow::Error::from)?;
    let diag = if draws.n_chains() >= 2 && draws.n_per_chain() >= 4 {
        Some(alignment_report(&draws, &align_default(&draws, &basis)?))
    } else {
        None
    };
    let n_stats: usize = draws.chains.iter().map(|c| c.stats.len()).sum();
    let accept: f64 = draws.chains.iter().flat_map(|c| &c.stats).map(|s| s.accept_prob).sum();
    let report = FitReport {
        dims: ctx.dims,
        variables: &ctx.variables,
        n_chains: draws.n_chains(),
        n_per_chain: draws.n_per_chain(),
        n_divergent: draws.n_divergent(),
        divergence_fraction: draws.divergence_fraction(),
        mean_accept_prob: accept / n_stats.max(1) as f64,
        max_rhat: diag.as_ref().and_then(|d| d.max_rhat),
        n_rhat_above_threshold: diag.as_ref().map_or(0, |d| d.n_rhat_above_threshold),
        variance_explained_formula: "global: sum_{j<=k} lambda_j / (sum_j lambda_j + sum_p sigma2_p); \
            share: sum_{j<=k} lambda_j |psi_j^(p)|^2 / same denominator; \
            within: sum_{j<=k} lambda_j |psi_j^(p)|^2 / (sum_j lambda_j |psi_j^(p)|^2 + sigma2_p); \
            standardised scale, components in descending eigenvalue order per draw",
    };
    write_json(&a.out.join("report.json"), &report)?;
    Ok(0)
}

fn cmd_export_basis(a: &ExportBasisArgs) -> CmdResult {
    let spec: BasisSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => BasisSpec::default(),
    };
    if a.points < 2 {
        return Err(Error::Config("need at least two points".into()).into());
    }
    let basis = OrthoBasis::from_spec(&spec)?;
    let points: Vec<f64> = (0..a.points).map(|i| i as f64 / (a.points - 1) as f64).collect();
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    basis.write_basis_csv(&points, create(&a.out.join("basis.csv"))?)?;
    let mut f = create(&a.out.join("penalty_p2.csv"))?;
    sparse_fpca::basis::write_matrix_csv(basis.p2(), &mut f)?;
    f.flush().map_err(anyhow::Error::from)?;
    Ok(0)
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn describe(error: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in error.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}
