use std::collections::BTreeMap;
use std::path::PathBuf;

use lever_core::harness::{aggregate, emit_report, load_report, render_markdown, EvalReport, OrderAblation, ReportFile, ReportFormat};

const SHOTS: [usize; 4] = [1, 2, 4, 8];

fn row(method: &str, accuracy: [f64; 4], log_confidence: [f64; 4]) -> EvalReport {
    let agg = |v: &[f64; 4]| {
        let map: BTreeMap<usize, f64> = SHOTS.iter().copied().zip(v.iter().copied()).collect();
        aggregate(&map, &SHOTS).unwrap()
    };
    EvalReport {
        method: method.into(),
        shots: SHOTS.to_vec(),
        accuracy: accuracy.to_vec(),
        log_confidence: log_confidence.to_vec(),
        accuracy_avg: agg(&accuracy),
        log_confidence_avg: agg(&log_confidence),
        queries: 400,
        seeds: vec![1, 1, 1, 1],
        config_digest: "c0ffee".into(),
    }
}

fn sample_report() -> ReportFile {
    ReportFile::new(
        "c0ffee",
        "5eed",
        vec![
            row("Lever-LM", [0.5, 0.75, 0.8, 0.825], [-0.9, -0.6, -0.5, -0.45]),
            row("RS", [0.25, 0.3, 0.35, 0.4], [-1.4, -1.3, -1.25, -1.2]),
        ],
        vec![OrderAblation {
            shots: 2,
            original_accuracy: 0.75,
            permuted_accuracy: 0.7,
            delta_accuracy: 0.05,
            original_log_confidence: -0.6,
            permuted_log_confidence: -0.65,
            evaluated: 400,
            skipped: 0,
            seed: 1,
        }],
    )
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report.md")
}

#[test]
fn markdown_matches_golden_file() {
    let rendered = render_markdown(&sample_report());
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(golden_path(), &rendered).unwrap();
    }
    let golden = std::fs::read_to_string(golden_path()).unwrap();
    assert_eq!(rendered, golden);
}

#[test]
fn structured_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let report = sample_report();
    emit_report(&report, &path, ReportFormat::Structured).unwrap();
    let back = load_report(&path).unwrap();
    assert_eq!(back, report);
    let bytes = std::fs::read(&path).unwrap();
    emit_report(&back, &path, ReportFormat::Structured).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn inconsistent_aggregates_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut report = sample_report();
    report.rows[1].accuracy_avg.all += 0.01;
    let err = emit_report(&report, &dir.path().join("r.json"), ReportFormat::Structured).unwrap_err();
    assert!(err.to_string().contains("RS"), "{err}");
}

#[test]
fn loading_a_foreign_document_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("other.json");
    std::fs::write(&path, r#"{"format_version":1,"kind":"world"}"#).unwrap();
    assert!(load_report(&path).is_err());
    assert!(load_report(&dir.path().join("missing.json")).is_err());
}
