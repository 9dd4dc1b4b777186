//! End-to-end behaviour on small synthetic fits: determinism, persistence,
//! prediction and alignment.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use sparse_fpca::basis::{BasisSpec, OrthoBasis};
use sparse_fpca::data::{standardize, Record, TimeDomain};
use sparse_fpca::persist;
use sparse_fpca::posterior::{Model, ModelConfig};
use sparse_fpca::postprocess::{
    alignment_report, default_reference, procrustes_align, variance_explained, ReferenceSource,
};
use sparse_fpca::predict::{dynamic_predict, static_predict, write_predictions_csv, NewObservation, PredictOptions};
use sparse_fpca::sampler::{self, PosteriorDraws, SamplerConfig, SamplerMode};
use sparse_fpca::simharness::{generate, Scenario};
use sparse_fpca::ErrorKind;

fn small_records(variables: usize) -> Vec<Record> {
    let scenario = Scenario {
        n_variables: variables,
        n_subjects: 15,
        n_grid: 30,
        obs_min: 4,
        obs_max: 8,
        eigenvalues: vec![1.0, 0.5],
        ..Scenario::default()
    };
    generate(&scenario, 0).unwrap().0
}

fn fit(records: &[Record], mode: SamplerMode, seed: u64) -> (PosteriorDraws, OrthoBasis) {
    let spec = BasisSpec { dim: 8, ..BasisSpec::default() };
    let basis = OrthoBasis::from_spec(&spec).unwrap();
    let (data, scaling) = standardize(records, TimeDomain::Pooled).unwrap();
    let model = Model::new(data, &basis, ModelConfig::new(2)).unwrap();
    let config = SamplerConfig { n_chains: 2, n_warmup: 100, n_samples: 60, seed, mode, ..SamplerConfig::default() };
    (sampler::run(&config, &model, spec, scaling).unwrap(), basis)
}

#[test]
fn same_seed_same_draws_for_both_samplers() {
    let records = small_records(2);
    for mode in [SamplerMode::FullHmc, SamplerMode::BlockedGibbs] {
        let (a, _) = fit(&records, mode, 5);
        let (b, _) = fit(&records, mode, 5);
        assert_eq!(a, b, "{mode:?}");
        let (c, _) = fit(&records, mode, 6);
        assert_ne!(a.chains, c.chains, "{mode:?}");
    }
}

#[test]
fn draws_are_ordered_and_orthonormal() {
    let (draws, _) = fit(&small_records(2), SamplerMode::FullHmc, 1);
    assert_eq!(draws.n_draws(), 120);
    for d in draws.iter() {
        assert!(d.lambda.windows(2).all(|w| w[0] > w[1]));
        let gram = d.psi.transpose() * &d.psi;
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-10);
        assert!(d.sigma2.iter().all(|s| *s > 0.0));
    }
}

#[test]
fn persistence_round_trip_is_exact_and_detects_tampering() {
    let (draws, _) = fit(&small_records(2), SamplerMode::FullHmc, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut inputs = BTreeMap::new();
    inputs.insert("data".to_string(), persist::sha256_hex(b"input"));
    let manifest = persist::save(&draws, dir.path(), "{}", inputs).unwrap();
    let (loaded, m2) = persist::load(dir.path()).unwrap();
    assert_eq!(loaded, draws);
    assert_eq!(m2, manifest);
    assert_eq!(manifest.config_hash, persist::sha256_hex(b"{}"));

    let path = dir.path().join("lambda.csv");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("0,999,1,2\n");
    std::fs::write(&path, text).unwrap();
    let err = persist::load(dir.path()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
}

#[test]
fn static_prediction_intervals_and_noise() {
    let (draws, basis) = fit(&small_records(2), SamplerMode::FullHmc, 3);
    let subjects = vec![draws.context.subjects[0].clone(), draws.context.subjects[3].clone()];
    let (lo, hi) = (draws.context.scaling.t_min, draws.context.scaling.t_max);
    let times = vec![lo, 0.5 * (lo + hi), hi];
    let base = PredictOptions::default();
    let latent = static_predict(&draws, &basis, &subjects, &times, &base).unwrap();
    assert_eq!(latent.len(), 2 * 2 * 3);
    for r in &latent {
        assert!(r.lo95 <= r.mean && r.mean <= r.hi95);
    }
    let noisy =
        static_predict(&draws, &basis, &subjects, &times, &PredictOptions { with_noise: true, ..base }).unwrap();
    let width = |rows: &[sparse_fpca::predict::PredictionRow]| rows.iter().map(|r| r.hi95 - r.lo95).sum::<f64>();
    assert!(width(&noisy) > width(&latent));

    // Same seed, same table; empty targets give an empty table.
    assert_eq!(latent, static_predict(&draws, &basis, &subjects, &times, &base).unwrap());
    assert!(static_predict(&draws, &basis, &subjects, &[], &base).unwrap().is_empty());
    let mut out = Vec::new();
    write_predictions_csv(&[], &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().trim(), "subject,variable,time,mean,lo95,hi95");

    // Outside the fitted range or unknown subject.
    let err = static_predict(&draws, &basis, &subjects, &[hi + 1.0], &base).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
    assert!(static_predict(&draws, &basis, &["nobody".to_string()], &times, &base).is_err());
}

#[test]
fn dynamic_prediction_window_and_errors() {
    let records = small_records(2);
    let (draws, basis) = fit(&records, SamplerMode::FullHmc, 4);
    let var = |name: &str| draws.context.variables.iter().position(|v| v == name).unwrap();
    let obs: Vec<NewObservation> = records
        .iter()
        .filter(|r| r.subject == draws.context.subjects[1])
        .map(|r| NewObservation { variable: var(&r.variable), time: r.time, value: r.value })
        .collect();
    let first = obs.iter().map(|o| o.time).fold(f64::INFINITY, f64::min);
    let cutoff = 0.6;
    let options = PredictOptions::default();
    let rows = dynamic_predict(&draws, &basis, "new", &obs, cutoff, 0.2, None, &options).unwrap();
    assert!(!rows.is_empty());
    for r in &rows {
        assert!(r.time >= first && r.time <= cutoff + 0.2 + 1e-12);
        assert!(r.lo95 <= r.mean && r.mean <= r.hi95);
    }
    // Observations after the cutoff are ignored.
    let early: Vec<NewObservation> = obs.iter().copied().filter(|o| o.time <= cutoff).collect();
    let again = dynamic_predict(&draws, &basis, "new", &early, cutoff, 0.2, None, &options).unwrap();
    assert_eq!(rows, again);

    assert!(dynamic_predict(&draws, &basis, "new", &obs, first - 0.01, 0.1, None, &options).is_err());
    assert!(dynamic_predict(&draws, &basis, "new", &obs, cutoff, -0.1, None, &options).is_err());
    assert!(dynamic_predict(&draws, &basis, "new", &obs, cutoff, 10.0, None, &options).is_err());
    assert!(dynamic_predict(&draws, &basis, "new", &obs, cutoff, 0.2, Some(&[cutoff + 0.3]), &options).is_err());
}

#[test]
fn alignment_report_and_variance_explained() {
    let (draws, basis) = fit(&small_records(2), SamplerMode::FullHmc, 7);
    let bt = basis.evaluate(&draws.context.times).unwrap();
    let reference = default_reference(&draws, &bt).unwrap();
    let aligned = procrustes_align(&draws, &bt, &reference, ReferenceSource::PosteriorMean).unwrap();
    for (r, d) in aligned.rotations.iter().zip(draws.iter()) {
        assert!((r.transpose() * r - DMatrix::identity(2, 2)).amax() < 1e-10);
        assert_eq!(r.nrows(), d.k());
    }
    let report = alignment_report(&draws, &aligned);
    assert_eq!(report.n_chains, 2);
    assert!(report.max_rhat.unwrap() >= 1.0 - 0.1);
    assert!(report.parameters.iter().any(|p| p.name == "lambda[0]"));

    let table = variance_explained(&draws, &[1, 2], 0.9).unwrap();
    assert_eq!(table.len(), 2);
    assert!(table[0].global.mean < table[1].global.mean && table[1].global.mean < 1.0);
    for row in &table {
        let shares: f64 = row.per_variable.iter().map(|s| s.mean).sum();
        assert!((shares - row.global.mean).abs() < 1e-10);
    }

    let wrong = DMatrix::zeros(3, 2);
    assert!(procrustes_align(&draws, &bt, &wrong, ReferenceSource::External("x".into())).is_err());
}
