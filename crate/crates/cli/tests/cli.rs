//! Command-line behaviour: exit codes, outputs and determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_sfpca");

fn data_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn sfpca(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("SFPCA_THREADS").output().expect("run sfpca")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fitted {
    _dir: tempfile::TempDir,
    out: PathBuf,
    elapsed: Duration,
    code: i32,
}

/// The bundled smoke fit, run once per test binary.
fn smoke_fit() -> &'static Fitted {
    static FIT: OnceLock<Fitted> = OnceLock::new();
    FIT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("fit");
        let start = Instant::now();
        let res = sfpca(&[
            "fit",
            "--data",
            path(&data_file("smoke.csv")),
            "--config",
            path(&data_file("smoke_config.json")),
            "--out",
            path(&out),
        ]);
        let elapsed = start.elapsed();
        assert!(matches!(code(&res), 0 | 4), "fit failed: {}", stderr(&res));
        Fitted { code: code(&res), _dir: dir, out, elapsed }
    })
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn smoke_fit_finishes_quickly_and_writes_everything() {
    let fit = smoke_fit();
    assert!(fit.elapsed < Duration::from_secs(120), "took {:?}", fit.elapsed);
    for f in [
        "manifest.json",
        "effective_config.json",
        "alignment_report.json",
        "data_summary.json",
        "sigma2.csv",
        "w_mu.csv",
        "h_mu.csv",
        "lambda.csv",
        "h_psi.csv",
        "psi.csv",
        "scores.csv",
        "stats.csv",
    ] {
        assert!(fit.out.join(f).is_file(), "missing {f}");
    }
    let report: serde_json::Value = serde_json::from_str(&read(&fit.out.join("alignment_report.json"))).unwrap();
    let flagged = report["n_rhat_above_threshold"].as_u64().unwrap() > 0 || report["divergence_flagged"] == true;
    assert_eq!(fit.code, if flagged { 4 } else { 0 });
    let manifest: serde_json::Value = serde_json::from_str(&read(&fit.out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["inputs"]["data"].as_str().unwrap().len(), 64);
}

#[test]
fn fits_are_reproducible() {
    let fit = smoke_fit();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again");
    let res = sfpca(&[
        "--threads",
        "1",
        "fit",
        "--data",
        path(&data_file("smoke.csv")),
        "--config",
        path(&data_file("smoke_config.json")),
        "--out",
        path(&again),
    ]);
    assert_eq!(code(&res), fit.code);
    for f in ["sigma2.csv", "lambda.csv", "psi.csv", "scores.csv", "stats.csv", "alignment_report.json"] {
        assert_eq!(read(&fit.out.join(f)), read(&again.join(f)), "{f} differs");
    }
}

#[test]
fn downstream_commands_reuse_saved_draws() {
    let fit = smoke_fit();
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);

    let res = sfpca(&["align", "--draws", path(&fit.out), "--out", path(&d("align"))]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let fpc = read(&d("align").join("fpc_estimate.csv"));
    assert!(fpc.starts_with("time,variable,k,mean,lo,hi"));
    assert!(d("align").join("aligned_scores.csv").is_file());

    let res = sfpca(&["report", "--draws", path(&fit.out), "--out", path(&d("report"))]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let ve = read(&d("report").join("variance_explained.csv"));
    assert_eq!(ve.lines().count(), 3);
    assert!(d("report").join("report.json").is_file());

    let new = d("new.csv");
    std::fs::write(&new, "subject,variable,time,value\nn1,bp,3,10.2\nn1,hr,5,-3.0\nn1,bp,30,9.0\n").unwrap();
    let res = sfpca(&[
        "dynamic-predict",
        "--draws",
        path(&fit.out),
        "--new",
        path(&new),
        "--cutoff",
        "20",
        "--horizon",
        "10",
        "--out",
        path(&d("dyn")),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let table = read(&d("dyn").join("dynamic_predictions.csv"));
    for line in table.lines().skip(1) {
        let t: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((3.0..=30.0).contains(&t));
    }

    let res = sfpca(&[
        "dynamic-predict",
        "--draws",
        path(&fit.out),
        "--new",
        path(&new),
        "--cutoff",
        "1",
        "--out",
        path(&d("dyn2")),
    ]);
    assert_eq!(code(&res), 2, "no observations before the cutoff: {}", stderr(&res));
}

#[test]
fn prediction_targets_duplicates_and_noise() {
    let fit = smoke_fit();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["predict", "--draws", path(&fit.out), "--out", path(&out)];
        args.extend_from_slice(extra);
        let res = sfpca(&args);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        (read(&out.join("predictions.csv")), stderr(&res), out)
    };

    let (empty, _, _) = run("empty", &["--times="]);
    assert_eq!(empty.trim(), "subject,variable,time,mean,lo95,hi95");

    let (dup, err, out) = run("dup", &["--subjects", "p01", "--times", "10,10,20,500"]);
    assert!(err.contains("duplicate"), "{err}");
    assert!(err.contains("outside"), "{err}");
    assert_eq!(dup.lines().count(), 1 + 2 * 2);
    assert!(read(&out.join("rejected_times.csv")).contains("500"));

    let width = |table: &str| -> f64 {
        table
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<f64> = l.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
                f[2] - f[1]
            })
            .sum()
    };
    let (latent, _, _) = run("latent", &["--subjects", "p01,p02", "--times", "5,25,45"]);
    let (noisy, _, _) = run("noisy", &["--subjects", "p01,p02", "--times", "5,25,45", "--with-noise"]);
    assert!(width(&noisy) > width(&latent));
    let (latent2, _, _) = run("latent2", &["--subjects", "p01,p02", "--times", "5,25,45"]);
    assert_eq!(latent, latent2);

    let res = sfpca(&["predict", "--draws", path(&fit.out), "--out", path(dir.path()), "--subjects", "zz"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn configuration_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let data = path(&data_file("smoke.csv")).to_string();
    let fit = |config: &Path, data: &str| {
        sfpca(&["fit", "--data", data, "--config", path(config), "--out", path(&dir.path().join("out"))])
    };

    std::fs::write(&cfg, r#"{"model": {}}"#).unwrap();
    let res = fit(&cfg, &data);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("n_components"));

    std::fs::write(&cfg, r#"{"model": {"n_components": 2}, "sampler": {"chains": 2}}"#).unwrap();
    assert_eq!(code(&fit(&cfg, &data)), 1);

    std::fs::write(&cfg, r#"{"model": {"n_components": 2}, "sampler": {"target_accept": 1.5}}"#).unwrap();
    assert_eq!(code(&fit(&cfg, &data)), 1);

    std::fs::write(&cfg, r#"{"model": {"n_components": 2}}"#).unwrap();
    assert_eq!(code(&fit(&cfg, path(&dir.path().join("missing.csv")))), 2);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "subject,variable,time,value\na,x,1,oops\n").unwrap();
    assert_eq!(code(&fit(&cfg, path(&bad))), 2);

    assert_eq!(code(&sfpca(&["fit", "--data", &data])), 1, "usage errors");
    assert_eq!(code(&sfpca(&["align", "--draws", path(dir.path()), "--out", path(dir.path())])), 2);
}

#[test]
fn simulate_writes_summary_matching_its_schema() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario.json");
    std::fs::write(
        &scenario,
        r#"{"scenario": {"design": "univariate", "n_variables": 1, "n_subjects": 15, "n_grid": 20,
            "obs_min": 3, "obs_max": 5, "eigenvalues": [1.0, 0.5], "n_replicates": 2},
           "engine": {"model": {"n_components": 2}, "basis": {"dim": 8, "degree": 3, "nodes_per_span": 10},
                      "sampler": {"n_chains": 2, "n_warmup": 60, "n_samples": 40}}}"#,
    )
    .unwrap();
    let out = dir.path().join("sim");
    let res = sfpca(&["simulate", "--scenario", path(&scenario), "--out", path(&out), "--save-draws"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let summary: serde_json::Value = serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    let schema: serde_json::Value = serde_json::from_str(&read(&out.join("summary.schema.json"))).unwrap();
    for key in schema["required"].as_array().unwrap() {
        assert!(summary.get(key.as_str().unwrap()).is_some(), "missing {key}");
    }
    assert_eq!(summary["n_replicates"], 2);
    for f in ["rise.csv", "ise_components.csv", "coverage.csv", "timing.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("draws").join("replicate_001").join("manifest.json").is_file());

    let res = sfpca(&[
        "report",
        "--draws",
        path(&out.join("draws").join("replicate_000")),
        "--out",
        path(&dir.path().join("r")),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
}

#[test]
fn basis_export_and_thread_setting() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("basis");
    let res = Command::new(BIN)
        .args(["export-basis", "--points", "11", "--out", path(&out)])
        .env("SFPCA_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let text = read(&out.join("basis.csv"));
    assert_eq!(text.lines().count(), 12);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 21);
    assert_eq!(read(&out.join("penalty_p2.csv")).lines().count(), 20);

    let res = sfpca(&["--threads", "0", "export-basis", "--out", path(&out)]);
    assert_eq!(code(&res), 0, "zero threads means the default pool");
}
