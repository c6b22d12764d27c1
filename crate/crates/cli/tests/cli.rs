use std::path::Path;
use std::process::{Command, Output};

use pixcon_cli::compare::{parse_seeds, run_compare, to_csv, CompareReport};
use pixcon_cli::{ExperimentConfig, Summary};

const SMALL: &str = "iterations = 30\nwarmup = 10\neval_every = 15\nlog_every = 5\neval_scenes = 2\nsource_scenes = 4\ntarget_scenes = 4\nbeta = 0.9\n";

fn pixcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pixcon")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.display().to_string()
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let out = pixcon(&["train", "/nonexistent/run.conf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.conf"));
}

#[test]
fn unknown_key_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "bad.conf", "lamda_cl = 1\n");
    let out = pixcon(&["train", &path]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.conf:9"), "{err}");
    assert!(err.contains("lamda_cl"), "{err}");
}

#[test]
fn bad_usage_exits_2() {
    assert_eq!(pixcon(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(pixcon(&["verify", "everything"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "a.conf", "");
    assert_eq!(pixcon(&["train", &path, "--override", "warmup"]).status.code(), Some(2));
    assert_eq!(pixcon(&["train", &path, "--override", "tau=-1"]).status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_and_honors_seed_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "run.conf", "");
    let out_dir = dir.path().join("run");
    let out = pixcon(&[
        "train",
        &path,
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "7",
        "--override",
        "variant=bank",
        "--override",
        "lambda_reg=0.5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Summary = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.seed, 7);
    assert_eq!(summary.config["variant"], "bank");
    assert_eq!(summary.config["lambda_reg"], "0.5");
    assert_eq!(summary.final_eval.per_class_iou.len(), 4);

    let trace = std::fs::read_to_string(out_dir.join("trace.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.last().unwrap()["iteration"], 29);
    assert!(lines.iter().filter(|l| l.get("eval").is_some()).count() >= 2);

    let csv = dir.path().join("emb.csv");
    let out = pixcon(&[
        "export-embeddings",
        out_dir.join("checkpoint.json").to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(csv).unwrap();
    // header plus one row per pixel of the two evaluation scenes
    assert_eq!(text.lines().count(), 1 + 2 * 24 * 24);
}

#[test]
fn export_of_missing_checkpoint_exits_2() {
    assert_eq!(pixcon(&["export-embeddings", "/nonexistent/checkpoint.json"]).status.code(), Some(2));
}

#[test]
fn verify_stats_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = pixcon(&["verify", "stats", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify_stats.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    for p in report["properties"].as_array().unwrap() {
        assert!(p["worst"].as_f64().unwrap() <= p["limit"].as_f64().unwrap(), "{p}");
    }
}

#[test]
fn comparing_a_config_with_itself_gives_zero_difference() {
    let cfg = ExperimentConfig::parse(SMALL, "small").unwrap();
    let report = run_compare(&[("a".into(), cfg.clone()), ("b".into(), cfg)], &[0, 1], 2).unwrap();
    let (a, b) = (report.get("a").unwrap(), report.get("b").unwrap());
    assert_eq!(a.mean.accuracy - b.mean.accuracy, 0.0);
    assert_eq!(a.runs, b.runs);
}

#[test]
fn compare_rejects_mismatched_benchmarks_and_single_configs() {
    let a = ExperimentConfig::parse(SMALL, "a").unwrap();
    let mut b = a.clone();
    b.generator.noise_std = 0.5;
    let err = run_compare(&[("a".into(), a.clone()), ("b".into(), b)], &[0], 1).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert_eq!(run_compare(&[("a".into(), a)], &[0], 1).unwrap_err().exit_code(), 2);
}

#[test]
fn compare_cli_output_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let base = write_config(dir.path(), "base.conf", "lambda_cl = 0\nlambda_reg = 0\ncbc = false\n");
    let full = write_config(dir.path(), "full.conf", "");
    let out_dir = dir.path().join("cmp");
    let out = pixcon(&["compare", &base, &full, "--seeds", "0-1", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: CompareReport =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(report.format, "pixcon-compare");
    assert_eq!(report.seeds, vec![0, 1]);
    let labels: Vec<&str> = report.configs.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["base", "full"]);
    for c in &report.configs {
        assert_eq!(c.runs.len(), 2);
        assert_eq!(c.config_hash.len(), 64);
        let mean = c.runs.iter().map(|r| r.accuracy).sum::<f64>() / 2.0;
        assert!((mean - c.mean.accuracy).abs() < 1e-12);
    }

    let csv = std::fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    assert_eq!(csv, to_csv(&report));
    let mut rows = csv.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    assert_eq!(&header[..3], ["config", "seed", "accuracy"]);
    let body: Vec<Vec<&str>> = rows.map(|r| r.split(',').collect()).collect();
    assert_eq!(body.len(), 6);
    assert!(body.iter().all(|r| r.len() == header.len()));
    assert_eq!(body[2][..2], ["base", "mean"]);
}

#[test]
fn seed_lists_parse() {
    assert_eq!(parse_seeds("0,1,2,3,4").unwrap(), vec![0, 1, 2, 3, 4]);
    assert_eq!(parse_seeds("3-5").unwrap(), vec![3, 4, 5]);
    assert!(parse_seeds("").is_err());
    assert!(parse_seeds("5-3").is_err());
}
