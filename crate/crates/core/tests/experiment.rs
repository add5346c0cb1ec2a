//! End-to-end runs of the experiment pipeline on synthetic data.

use std::fs;
use std::path::Path;
use std::time::Instant;

use qutelab::experiment::{
    build_report, emit_report, parse_config_str, run_experiment, ExperimentConfig, Report, ReportFormat, RunManifest, RunOptions, AUPRC_HEADER,
    CALIBRATION_HEADER, FAILURE_HEADER, MANIFEST_FILE, POOLED_ROW,
};
use qutelab::Error;

fn synth(method: &str, seeds: &[u64], epochs: usize) -> ExperimentConfig {
    parse_config_str(&format!(
        r#"{{
            "dataset": "synth", "method": "{method}", "seeds": {seeds:?},
            "train": {{"epochs": {epochs}, "batch_size": 32, "initial_lr": 0.003, "augment": false}},
            "data": {{"synth_train": 1200, "synth_test": 300}}
        }}"#
    ))
    .unwrap()
}

fn run(cfg: &ExperimentConfig, out: &Path) -> RunManifest {
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        ..RunOptions::new("no-data-needed")
    };
    run_experiment(cfg, &opts).unwrap()
}

#[test]
fn single_seed_run_writes_every_artifact_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synth("base", &[0], 3);
    cfg.data.synth_train = 4000;
    let started = Instant::now();
    let m = run(&cfg, dir.path());
    assert!(started.elapsed().as_secs() < 60);
    assert_eq!(m.seeds.len(), 1);
    let s = &m.seeds[0];
    assert!(!s.cached);
    let f1 = s.calibration.as_ref().unwrap().f1;
    assert!(f1 > 0.9, "f1 {f1}");
    assert!(s.drift.is_some() && s.failure.is_some());
    for a in &m.artifacts {
        assert!(a.exists(), "{}", a.display());
    }
    for f in ["calibration.json", "reliability.csv", "pr_curve.csv", "auprc.csv", "failure.json"] {
        assert!(dir.path().join("seed-0").join(f).exists(), "{f}");
    }
    assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
}

#[test]
fn rerun_loads_the_cached_model_and_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth("qute", &[1], 1);
    let first = run(&cfg, dir.path());
    let second = run(&cfg, dir.path());
    assert!(!first.seeds[0].cached);
    assert!(second.seeds[0].cached);
    assert_eq!(first.seeds[0].calibration, second.seeds[0].calibration);
    assert_eq!(first.seeds[0].drift, second.seeds[0].drift);
    assert_eq!(first.seeds[0].failure, second.seeds[0].failure);
}

#[test]
fn independent_runs_emit_byte_identical_reports() {
    let cfg = synth("qute", &[0, 1], 1);
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let m = run(&cfg, dir.path());
        let files = emit_report(&m, ReportFormat::Csv, &dir.path().join("report")).unwrap();
        let bodies: Vec<(String, Vec<u8>)> = files
            .iter()
            .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(f).unwrap()))
            .collect();
        outputs.push(bodies);
    }
    assert_eq!(outputs[0].len(), 5);
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn reports_aggregate_seeds_with_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth("mcd", &[0, 1, 2], 1);
    let m = run_experiment(
        &cfg,
        &RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            jobs: 3,
            ..RunOptions::new("unused")
        },
    )
    .unwrap();
    assert_eq!(m.seeds.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
    let report = build_report(&m).unwrap();
    let cal = report.calibration.unwrap();
    assert!(cal.nll.std > 0.0);
    assert!(report.auprc.contains_key(POOLED_ROW));
    assert_eq!(report.auprc.len(), cfg.corruptions.len() + 1);
    assert_eq!(report.failure.len(), 2);

    let csv_dir = dir.path().join("csv");
    emit_report(&m, ReportFormat::Csv, &csv_dir).unwrap();
    let cal_csv = fs::read_to_string(csv_dir.join("calibration.csv")).unwrap();
    let mut lines = cal_csv.lines();
    assert_eq!(lines.next(), Some(CALIBRATION_HEADER));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), CALIBRATION_HEADER.split(',').count());
    assert_eq!(row[1], "3");
    assert!(fs::read_to_string(csv_dir.join("auprc.csv")).unwrap().starts_with(AUPRC_HEADER));
    assert!(fs::read_to_string(csv_dir.join("failure.csv")).unwrap().starts_with(FAILURE_HEADER));

    let json_dir = dir.path().join("json");
    emit_report(&m, ReportFormat::Json, &json_dir).unwrap();
    let parsed: Report = serde_json::from_str(&fs::read_to_string(json_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(parsed, build_report(&m).unwrap());
}

#[test]
fn report_refuses_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let m = run(&synth("base", &[0], 1), dir.path());
    fs::remove_file(dir.path().join("seed-0").join("auprc.csv")).unwrap();
    let err = build_report(&m).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)));
    assert_eq!(err.exit_code(), 3);
    assert!(matches!(RunManifest::load(&dir.path().join("nowhere")), Err(Error::MissingArtifact(_))));
    assert!(!dir.path().join("nowhere").join(MANIFEST_FILE).exists());
}

#[test]
fn mnist_without_data_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::new(qutelab::experiment::DatasetKind::Mnist, qutelab::experiment::Method::Base);
    let opts = RunOptions {
        out_dir: Some(dir.path().join("out")),
        ..RunOptions::new(dir.path().join("empty"))
    };
    let err = run_experiment(&cfg, &opts).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn config_errors_name_the_offending_field() {
    let err = parse_config_str(r#"{"dataset": "synth", "method": "qute", "train": {"epochz": 3}}"#).unwrap_err();
    match &err {
        Error::Config { path, message } => {
            assert!(path.starts_with("train"), "{path}");
            assert!(message.contains("epochz"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(err.exit_code(), 2);
    let bad_k = parse_config_str(r#"{"dataset": "synth", "method": "qute", "arch": {"k": 0}}"#);
    assert!(bad_k.is_err_and(|e| e.exit_code() == 2));
}

#[test]
fn config_hash_ignores_output_location_only() {
    let a = synth("qute", &[0], 2);
    let mut b = a.clone();
    b.output_dir = "elsewhere".into();
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    b.train.epochs = 3;
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    assert_ne!(a.model_hash(0).unwrap(), a.model_hash(1).unwrap());
}
