//! On-disk format of a fit: `manifest.json` plus one CSV per parameter
//! group, so downstream commands can reload the draws without refitting.
//!
//! Every group file has leading `chain,draw` columns followed by one column
//! per scalar. Floats are written in shortest round-trip form, so loading
//! reproduces the draws bit for bit. The manifest records SHA-256 digests
//! of the input data and of every file written.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sampler::{Chain, Draw, DrawStats, FitContext, PosteriorDraws};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub engine_version: String,
    pub seed: u64,
    /// SHA-256 of the effective configuration JSON.
    pub config_hash: String,
    /// SHA-256 of each input file, by name.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each draw file, by name.
    pub files: BTreeMap<String, String>,
    pub created_unix: u64,
    pub context: FitContext,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

type Column<'a> = (String, Box<dyn Fn(&Draw) -> f64 + 'a>);

fn group_columns(ctx: &FitContext) -> Vec<(&'static str, Vec<Column<'static>>)> {
    let d = ctx.dims;
    let mut groups: Vec<(&'static str, Vec<Column<'static>>)> = Vec::new();
    groups.push((
        "sigma2",
        (0..d.p).map(|p| (format!("sigma2[{p}]"), Box::new(move |x: &Draw| x.sigma2[p]) as _)).collect(),
    ));
    groups.push((
        "w_mu",
        (0..d.pq()).map(|j| (format!("w_mu[{j}]"), Box::new(move |x: &Draw| x.w_mu[j]) as _)).collect(),
    ));
    groups.push(("h_mu", (0..d.p).map(|p| (format!("h_mu[{p}]"), Box::new(move |x: &Draw| x.h_mu[p]) as _)).collect()));
    groups.push((
        "lambda",
        (0..d.k).map(|k| (format!("lambda[{k}]"), Box::new(move |x: &Draw| x.lambda[k]) as _)).collect(),
    ));
    let mut h = Vec::new();
    for p in 0..d.p {
        for k in 0..d.k {
            h.push((format!("h_psi[{p},{k}]"), Box::new(move |x: &Draw| x.h_psi[(p, k)]) as _));
        }
    }
    groups.push(("h_psi", h));
    let mut psi = Vec::new();
    for j in 0..d.pq() {
        for k in 0..d.k {
            psi.push((format!("psi[{j},{k}]"), Box::new(move |x: &Draw| x.psi[(j, k)]) as _));
        }
    }
    groups.push(("psi", psi));
    let mut scores = Vec::new();
    for i in 0..d.n {
        for k in 0..d.k {
            scores.push((format!("scores[{i},{k}]"), Box::new(move |x: &Draw| x.scores[(i, k)]) as _));
        }
    }
    groups.push(("scores", scores));
    groups
}

const STATS_HEADER: [&str; 9] =
    ["chain", "draw", "accept_prob", "divergent", "depth", "n_leapfrog", "energy", "step_size", "lambda_kept"];

/// Writes the draws and the manifest into `dir` (created if needed).
/// Returns the manifest.
pub fn save(
    draws: &PosteriorDraws,
    dir: &Path,
    config_json: &str,
    inputs: BTreeMap<String, String>,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for (name, columns) in group_columns(&draws.context) {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(columns.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for (c, chain) in draws.chains.iter().enumerate() {
            for (s, draw) in chain.draws.iter().enumerate() {
                let mut row = vec![c.to_string(), s.to_string()];
                row.extend(columns.iter().map(|(_, f)| f(draw).to_string()));
                w.write_record(&row)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let file = format!("{name}.csv");
        std::fs::write(dir.join(&file), &bytes)?;
        files.insert(file, sha256_hex(&bytes));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(STATS_HEADER)?;
    for (c, chain) in draws.chains.iter().enumerate() {
        for (s, st) in chain.stats.iter().enumerate() {
            w.write_record([
                c.to_string(),
                s.to_string(),
                st.accept_prob.to_string(),
                u8::from(st.divergent).to_string(),
                st.depth.to_string(),
                st.n_leapfrog.to_string(),
                st.energy.to_string(),
                st.step_size.to_string(),
                u8::from(st.lambda_kept).to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    std::fs::write(dir.join("stats.csv"), &bytes)?;
    files.insert("stats.csv".into(), sha256_hex(&bytes));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: draws.context.sampler.seed,
        config_hash: sha256_hex(config_json.as_bytes()),
        inputs,
        files,
        created_unix: unix_now(),
        context: draws.context.clone(),
    };
    let mut f = std::fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    Ok(manifest)
}

/// Reads one group file into `[chain][draw][column]`.
fn read_group(path: &Path, expected_cols: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let width = reader.headers()?.len();
    if width != expected_cols + 2 {
        return Err(Error::Format(format!("{} has {} columns, expected {}", path.display(), width, expected_cols + 2)));
    }
    let mut out: Vec<Vec<Vec<f64>>> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("{} line {}: bad number", path.display(), line + 2)))
        };
        let chain = parse(0)? as usize;
        let draw = parse(1)? as usize;
        if chain == out.len() {
            out.push(Vec::new());
        }
        if chain + 1 != out.len() || draw != out[chain].len() {
            return Err(Error::Format(format!("{} line {}: rows out of order", path.display(), line + 2)));
        }
        out[chain].push((2..width).map(parse).collect::<Result<_>>()?);
    }
    Ok(out)
}

/// Loads draws written by [`save`], verifying file digests.
pub fn load(dir: &Path) -> Result<(PosteriorDraws, Manifest)> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {}", manifest.format_version)));
    }
    for (file, digest) in &manifest.files {
        if &sha256_file(&dir.join(file))? != digest {
            return Err(Error::Format(format!("{file} does not match its recorded digest")));
        }
    }
    let ctx = manifest.context.clone();
    let d = ctx.dims;
    let mut groups = BTreeMap::new();
    for (name, cols) in group_columns(&ctx) {
        groups.insert(name, read_group(&dir.join(format!("{name}.csv")), cols.len())?);
    }
    let n_chains = groups["sigma2"].len();
    if groups.values().any(|g| g.len() != n_chains) {
        return Err(Error::Format("parameter files disagree on the number of chains".into()));
    }
    let stats = read_stats(&dir.join("stats.csv"))?;
    let mut chains = Vec::with_capacity(n_chains);
    for c in 0..n_chains {
        let n = groups["sigma2"][c].len();
        if groups.values().any(|g| g[c].len() != n) || stats.get(c).is_none_or(|s| s.len() != n) {
            return Err(Error::Format(format!("chain {c} has inconsistent draw counts")));
        }
        let draws = (0..n)
            .map(|s| {
                let g = |name: &str| &groups[name][c][s];
                Draw {
                    sigma2: g("sigma2").clone(),
                    w_mu: DVector::from_column_slice(g("w_mu")),
                    h_mu: g("h_mu").clone(),
                    lambda: g("lambda").clone(),
                    h_psi: DMatrix::from_row_slice(d.p, d.k, g("h_psi")),
                    psi: DMatrix::from_row_slice(d.pq(), d.k, g("psi")),
                    scores: DMatrix::from_row_slice(d.n, d.k, g("scores")),
                }
            })
            .collect();
        chains.push(Chain { draws, stats: stats[c].clone() });
    }
    Ok((PosteriorDraws { context: ctx, chains }, manifest))
}

fn read_stats(path: &Path) -> Result<Vec<Vec<DrawStats>>> {
    let rows = read_group(path, STATS_HEADER.len() - 2)?;
    Ok(rows
        .into_iter()
        .map(|chain| {
            chain
                .into_iter()
                .map(|r| DrawStats {
                    accept_prob: r[0],
                    divergent: r[1] != 0.0,
                    depth: r[2] as usize,
                    n_leapfrog: r[3] as usize,
                    energy: r[4],
                    step_size: r[5],
                    lambda_kept: r[6] != 0.0,
                })
                .collect()
        })
        .collect())
}
