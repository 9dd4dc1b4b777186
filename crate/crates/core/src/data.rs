//! Long-format ingestion, standardisation and the stacked observation layout.
//!
//! Observations are stored variable-major: the rows of variable `p` form the
//! contiguous block `offsets[p]..offsets[p + 1]`, ordered by subject and then
//! time within the block. Times are pooled across variables and subjects into
//! one ascending grid on `[0, 1]` and each observation keeps an index into it.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, quantile_sorted, sample_var};

/// Rescaled times closer than this are merged into one grid point.
pub const TIME_MERGE_TOLERANCE: f64 = 1e-12;

/// Column names of the long-format input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnSpec {
    pub subject: String,
    pub variable: String,
    pub time: String,
    pub value: String,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self { subject: "subject".into(), variable: "variable".into(), time: "time".into(), value: "value".into() }
    }
}

/// One validated input row in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub subject: String,
    pub variable: String,
    pub time: f64,
    pub value: f64,
}

/// Reads long-format records, rejecting missing columns, unparseable or
/// non-finite numbers and duplicated `(subject, variable, time)` triples.
pub fn read_long_csv<R: Read>(input: R, columns: &ColumnSpec) -> Result<Vec<Record>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Format(format!("missing column `{name}`")))
    };
    let (ci, cv, ct, cy) =
        (find(&columns.subject)?, find(&columns.variable)?, find(&columns.time)?, find(&columns.value)?);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (row, result) in reader.records().enumerate() {
        // Line numbers count the header as line 1.
        let line = row + 2;
        let rec = result?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let number = |c: usize, what: &str| -> Result<f64> {
            let raw = field(c);
            let v: f64 =
                raw.parse().map_err(|_| Error::Data(format!("line {line}: {what} `{raw}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line}: {what} `{raw}` is not finite")));
            }
            Ok(v)
        };
        let time = number(ct, "time")?;
        let value = number(cy, "value")?;
        let subject = field(ci).to_string();
        let variable = field(cv).to_string();
        let key = (subject.clone(), variable.clone(), (time + 0.0).to_bits());
        if !seen.insert(key) {
            return Err(Error::Data(format!(
                "line {line}: duplicate observation for subject `{subject}`, variable `{variable}`, time {time}"
            )));
        }
        records.push(Record { subject, variable, time, value });
    }
    Ok(records)
}

pub fn read_long_csv_path(path: &Path, columns: &ColumnSpec) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path)?;
    read_long_csv(std::io::BufReader::new(file), columns)
}

/// Centre and scale of one variable in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableScale {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// Everything needed to map standardised quantities back to original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub variables: Vec<VariableScale>,
    pub t_min: f64,
    pub t_max: f64,
}

impl ScalingRecord {
    pub fn n_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn to_unit_time(&self, t: f64) -> f64 {
        (t - self.t_min) / (self.t_max - self.t_min)
    }

    pub fn to_original_time(&self, s: f64) -> f64 {
        self.t_min + s * (self.t_max - self.t_min)
    }

    /// Maps an original time into `[0, 1]`, rejecting times outside the
    /// fitted range (a relative slack of 1e-12 absorbs round-off).
    pub fn unit_time_checked(&self, t: f64) -> Result<f64> {
        let s = self.to_unit_time(t);
        let slack = 1e-12;
        if !s.is_finite() || s < -slack || s > 1.0 + slack {
            return Err(Error::Domain(format!(
                "time {t} lies outside the fitted range [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(s.clamp(0.0, 1.0))
    }

    pub fn standardize_value(&self, p: usize, v: f64) -> f64 {
        let s = &self.variables[p];
        (v - s.mean) / s.sd
    }

    pub fn destandardize_value(&self, p: usize, z: f64) -> f64 {
        let s = &self.variables[p];
        z * s.sd + s.mean
    }

    /// Noise standard deviation on the original scale.
    pub fn destandardize_noise_sd(&self, p: usize, sd: f64) -> f64 {
        sd * self.variables[p].sd
    }

    pub fn destandardize_sigma2(&self, p: usize, sigma2: f64) -> f64 {
        sigma2 * self.variables[p].sd * self.variables[p].sd
    }

    /// Multiplies each variable's block of rows (of length `q`) by its sd.
    ///
    /// Applies to FPC spline weights. The result is no longer orthonormal
    /// under the sum inner product unless all sds agree.
    pub fn destandardize_blocks(&self, m: &nalgebra::DMatrix<f64>, q: usize) -> Result<nalgebra::DMatrix<f64>> {
        self.check_rows(m.nrows(), q)?;
        let mut out = m.clone();
        for (p, s) in self.variables.iter().enumerate() {
            out.rows_mut(p * q, q).scale_mut(s.sd);
        }
        Ok(out)
    }

    /// Destandardises a curve evaluated per variable: `values[p][m]`.
    pub fn destandardize_curves(&self, values: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if values.len() != self.variables.len() {
            return Err(Error::Shape(format!("expected {} variables, got {}", self.variables.len(), values.len())));
        }
        Ok(values
            .iter()
            .enumerate()
            .map(|(p, row)| row.iter().map(|&z| self.destandardize_value(p, z)).collect())
            .collect())
    }

    fn check_rows(&self, rows: usize, q: usize) -> Result<()> {
        if rows != self.variables.len() * q {
            return Err(Error::Shape(format!(
                "expected {} rows ({} variables x {q}), got {rows}",
                self.variables.len() * q,
                self.variables.len()
            )));
        }
        Ok(())
    }
}

/// How observation times are mapped onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeDomain {
    /// Pooled minimum maps to 0 and pooled maximum to 1.
    #[default]
    Pooled,
    /// A known domain `[start, end]`, e.g. when the design grid is fixed.
    Fixed(f64, f64),
}

/// One observation in stacked layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub subject: usize,
    pub time_idx: usize,
    pub y: f64,
}

/// Standardised sparse multivariate functional data.
#[derive(Debug, Clone)]
pub struct Dataset {
    subjects: Vec<String>,
    variables: Vec<String>,
    times: Vec<f64>,
    obs: Vec<Observation>,
    offsets: Vec<usize>,
    /// Per subject, per variable: observation indices.
    by_subject: Vec<Vec<Vec<usize>>>,
}

impl Dataset {
    /// Builds a dataset from already standardised parts. `obs[p]` holds the
    /// observations of variable `p`; an empty dataset (no observations) is
    /// allowed here, e.g. for prior-only computations.
    pub fn from_parts(
        subjects: Vec<String>,
        variables: Vec<String>,
        times: Vec<f64>,
        obs: Vec<Vec<Observation>>,
    ) -> Result<Self> {
        if obs.len() != variables.len() {
            return Err(Error::Shape(format!(
                "{} variable names but {} observation blocks",
                variables.len(),
                obs.len()
            )));
        }
        if variables.is_empty() || subjects.is_empty() {
            return Err(Error::Data("dataset needs at least one subject and one variable".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) || times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Data("pooled times must be strictly ascending within [0, 1]".into()));
        }
        let n = subjects.len();
        let p_count = variables.len();
        let mut stacked = Vec::new();
        let mut offsets = vec![0];
        for block in obs {
            let mut block = block;
            for o in &block {
                if o.subject >= n || o.time_idx >= times.len() || !o.y.is_finite() {
                    return Err(Error::Data(format!("invalid observation {o:?}")));
                }
            }
            block.sort_by_key(|o| (o.subject, o.time_idx));
            if block.windows(2).any(|w| w[0].subject == w[1].subject && w[0].time_idx == w[1].time_idx) {
                return Err(Error::Data("duplicate (subject, time) within a variable".into()));
            }
            stacked.extend(block);
            offsets.push(stacked.len());
        }
        let mut by_subject = vec![vec![Vec::new(); p_count]; n];
        for p in 0..p_count {
            for l in offsets[p]..offsets[p + 1] {
                by_subject[stacked[l].subject][p].push(l);
            }
        }
        Ok(Self { subjects, variables, times, obs: stacked, offsets, by_subject })
    }

    /// Copy with the stacked response values replaced (same layout).
    pub fn with_values(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.obs.len() {
            return Err(Error::Shape(format!("expected {} values, got {}", self.obs.len(), y.len())));
        }
        let mut out = self.clone();
        for (o, &v) in out.obs.iter_mut().zip(y) {
            o.y = v;
        }
        Ok(out)
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_obs(&self) -> usize {
        self.obs.len()
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    /// Pooled ascending times on `[0, 1]`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    /// Observations of variable `p` (contiguous block).
    pub fn block(&self, p: usize) -> &[Observation] {
        &self.obs[self.offsets[p]..self.offsets[p + 1]]
    }

    pub fn block_range(&self, p: usize) -> std::ops::Range<usize> {
        self.offsets[p]..self.offsets[p + 1]
    }

    /// Per-variable observation counts.
    pub fn var_card(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Stacked indices of subject `i`'s observations of variable `p`.
    pub fn subject_obs(&self, i: usize, p: usize) -> &[usize] {
        &self.by_subject[i][p]
    }

    /// Number of observations of subject `i` in variable `p`.
    pub fn count(&self, i: usize, p: usize) -> usize {
        self.by_subject[i][p].len()
    }

    pub fn summary(&self) -> DatasetSummary {
        let per_variable = (0..self.n_variables())
            .map(|p| {
                let mut counts: Vec<f64> = (0..self.n_subjects()).map(|i| self.count(i, p) as f64).collect();
                counts.sort_by(|a, b| a.total_cmp(b));
                let q = |prob| quantile_sorted(&counts, prob);
                VariableSummary {
                    name: self.variables[p].clone(),
                    n_obs: self.offsets[p + 1] - self.offsets[p],
                    j_min: q(0.0),
                    j_q25: q(0.25),
                    j_median: q(0.5),
                    j_q75: q(0.75),
                    j_max: q(1.0),
                }
            })
            .collect();
        DatasetSummary {
            n_subjects: self.n_subjects(),
            n_variables: self.n_variables(),
            n_times: self.n_times(),
            n_observations: self.n_obs(),
            per_variable,
        }
    }
}

/// Dataset dimensions and per-variable observation-count quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_subjects: usize,
    pub n_variables: usize,
    pub n_times: usize,
    pub n_observations: usize,
    pub per_variable: Vec<VariableSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub name: String,
    pub n_obs: usize,
    pub j_min: f64,
    pub j_q25: f64,
    pub j_median: f64,
    pub j_q75: f64,
    pub j_max: f64,
}

/// Standardises each variable to sample mean 0 and sd 1 (n−1 denominator),
/// maps times onto `[0, 1]` and builds the stacked layout.
///
/// Subjects and variables keep their order of first appearance.
pub fn standardize(records: &[Record], domain: TimeDomain) -> Result<(Dataset, ScalingRecord)> {
    if records.is_empty() {
        return Err(Error::Data("dataset has no observations".into()));
    }
    let mut subject_ids: HashMap<&str, usize> = HashMap::new();
    let mut variable_ids: HashMap<&str, usize> = HashMap::new();
    let mut subjects = Vec::new();
    let mut variables = Vec::new();
    for r in records {
        subject_ids.entry(&r.subject).or_insert_with(|| {
            subjects.push(r.subject.clone());
            subjects.len() - 1
        });
        variable_ids.entry(&r.variable).or_insert_with(|| {
            variables.push(r.variable.clone());
            variables.len() - 1
        });
    }
    let (t_min, t_max) = match domain {
        TimeDomain::Pooled => {
            records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.time), hi.max(r.time)))
        }
        TimeDomain::Fixed(a, b) => {
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(Error::Config(format!("invalid time domain [{a}, {b}]")));
            }
            if let Some(r) = records.iter().find(|r| r.time < a || r.time > b) {
                return Err(Error::Data(format!("time {} lies outside the declared domain [{a}, {b}]", r.time)));
            }
            (a, b)
        }
    };
    if !(t_max > t_min) {
        return Err(Error::Data("all observations share one time; cannot rescale time".into()));
    }

    let mut scales = Vec::with_capacity(variables.len());
    for (p, name) in variables.iter().enumerate() {
        let values: Vec<f64> =
            records.iter().filter(|r| variable_ids[r.variable.as_str()] == p).map(|r| r.value).collect();
        let sd = sample_var(&values).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Data(format!("variable `{name}` has zero variance; cannot standardise")));
        }
        scales.push(VariableScale { name: name.clone(), mean: mean(&values), sd });
    }
    let scaling = ScalingRecord { variables: scales, t_min, t_max };

    let unit: Vec<f64> = records.iter().map(|r| scaling.to_unit_time(r.time).clamp(0.0, 1.0)).collect();
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| unit[a].total_cmp(&unit[b]));
    let mut times = Vec::new();
    let mut time_idx = vec![0; records.len()];
    for &r in &order {
        match times.last() {
            Some(&last) if unit[r] - last <= TIME_MERGE_TOLERANCE => {}
            _ => times.push(unit[r]),
        }
        time_idx[r] = times.len() - 1;
    }

    let mut blocks = vec![Vec::new(); variables.len()];
    for (l, r) in records.iter().enumerate() {
        let p = variable_ids[r.variable.as_str()];
        blocks[p].push(Observation {
            subject: subject_ids[r.subject.as_str()],
            time_idx: time_idx[l],
            y: scaling.standardize_value(p, r.value),
        });
    }
    let dataset = Dataset::from_parts(subjects, variables, times, blocks)?;
    Ok((dataset, scaling))
}
