use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
seed = 11
[synth]
n = 240
prevalence = { normal = 0.4, mild = 0.2, moderate = 0.2, severe = 0.2 }
[cohort]
external_cutoff = "2023-09-01T00:00:00Z"
[gbt]
n_rounds = 40
[evaluation]
resamples = 40
[explain]
resamples = 5
"#;

const STAGES: [&[&str]; 9] = [
    &["synth"],
    &["preprocess"],
    &["extract"],
    &["cohort"],
    &["train"],
    &["evaluate"],
    &["evaluate", "--cohort", "external"],
    &["explain", "--modality", "multimodal"],
    &["report"],
];

fn lvef(dir: &Path, threads: usize, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvef"))
        .arg("--config")
        .arg(dir.join("config.toml"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn summary(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn run_all(dir: &Path, threads: usize) {
    fs::write(dir.join("config.toml"), CONFIG).unwrap();
    for args in STAGES {
        let out = lvef(dir, threads, args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stdout)
        );
        assert_eq!(summary(&out)["status"], "ok");
    }
}

#[test]
fn full_pipeline_is_deterministic_across_runs_and_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(a.path(), 1);
    run_all(b.path(), 3);

    let out_a = a.path().join("out");
    let out_b = b.path().join("out");
    for rel in [
        "features/ecg_features.csv",
        "cohort/features.csv",
        "models/multimodal.json",
        "eval/internal_multimodal.json",
        "eval/internal_ecg_only.json",
        "eval/external_ehr_only.json",
        "explain/multimodal/shap_severe.csv",
        "explain/multimodal/stability_severe.json",
        "report.json",
    ] {
        let x = fs::read(out_a.join(rel)).unwrap();
        let y = fs::read(out_b.join(rel)).unwrap();
        assert!(x == y, "{rel} differs between runs");
    }

    // every report carries provenance
    let report: Value =
        serde_json::from_slice(&fs::read(out_a.join("eval/internal_multimodal.json")).unwrap()).unwrap();
    let prov = &report["provenance"];
    assert_eq!(prov["config_sha256"].as_str().unwrap().len(), 64);
    assert!(prov["clinical_catalog"].is_string());
    assert_eq!(report["cohort"], "internal_test");
    let ext: Value =
        serde_json::from_slice(&fs::read(out_a.join("eval/external_multimodal.json")).unwrap()).unwrap();
    assert_eq!(ext["cohort"], "temporal_external");
    assert!(out_a.join("report.md").exists());
}

#[test]
fn stage_without_upstream_artifact_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    for args in [&["train"][..], &["extract"], &["evaluate"], &["report"]] {
        let out = lvef(dir.path(), 1, args);
        assert_eq!(out.status.code(), Some(3), "{args:?}");
        assert_eq!(summary(&out)["kind"], "UpstreamArtifactMissing");
    }
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["bogus = 1", "[gbt]\nmax_depth = 0", "[evaluation]\nalpha = 2.0"] {
        fs::write(dir.path().join("config.toml"), text).unwrap();
        let out = lvef(dir.path(), 1, &["synth"]);
        assert_eq!(out.status.code(), Some(2), "{text}");
        assert_eq!(summary(&out)["kind"], "ConfigInvalid");
    }
}
