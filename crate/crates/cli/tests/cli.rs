use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_inverse-uq"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path) {
    let o = run(&[
        "generate-synthetic",
        "--basins",
        "6",
        "--days",
        "1100",
        "--distractors",
        "2",
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn tiny_config(data: &Path, out: &Path, mode: &str) -> Value {
    json!({
        "data": {"dir": data},
        "split": {
            "n_train_basins": 4,
            "seed": 1,
            "train_years": {"start": 2000, "end": 2001},
            "val_years": {"start": 2001, "end": 2002},
            "test_years": {"start": 2002, "end": 2003}
        },
        "model": {"hidden_size": 4, "embed_size": 4, "regressor_hidden": 4, "decoder_hidden": 4, "mode": mode},
        "train": {
            "epochs": 2, "batch_size": 2, "ensemble_size": 2, "mc_samples": 4,
            "lookback": 30, "stride": 30, "kl_weight": "per_sequence"
        },
        "forward": {
            "hidden_size": 4, "epochs": 2, "batch_size": 4, "lookback": 60,
            "stride": 60, "warmup": 10, "ensemble_size": 2
        },
        "forward_statics": "estimated",
        "output_dir": out
    })
}

fn write_config(path: &Path, cfg: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn missing_data_dir_is_an_input_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no_such_data");
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, &tiny_config(&missing, &tmp.path().join("out"), "bayesian"));
    let o = run(&["run-all", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no_such_data"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(code(&run(&["frobnicate"])), 64);
    assert_eq!(code(&run(&["train-inverse"])), 64);
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    let mut v = tiny_config(tmp.path(), tmp.path(), "bayesian");
    v["train"]["learning_rte"] = json!(0.1);
    write_config(&cfg, &v);
    let o = run(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rte"), "{}", stderr(&o));
}

#[test]
fn deterministic_evaluation_reports_no_coverage() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let out = tmp.path().join("det");
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, &tiny_config(&data, &out, "deterministic"));
    let o = run(&["run-all", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(&out);
    for c in r["per_characteristic"].as_array().unwrap() {
        assert!(c["coverage"].is_null(), "{c}");
        assert!(c["nse"].is_number() || c["nse"].is_null());
    }
    assert!(r["aggregate"]["coverage_pooled"].is_null());
}

#[test]
fn run_all_matches_sequential_stages_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);

    let all = tmp.path().join("all");
    let cfg_all = tmp.path().join("all.json");
    write_config(&cfg_all, &tiny_config(&data, &all, "bayesian"));
    let o = run(&["run-all", "--config", cfg_all.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let seq = tmp.path().join("seq");
    let cfg_seq = tmp.path().join("seq.json");
    write_config(&cfg_seq, &tiny_config(&data, &seq, "bayesian"));
    for stage in ["train-inverse", "export-statics", "train-forward", "evaluate"] {
        let o = run(&[stage, "--config", cfg_seq.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    let a = std::fs::read(all.join("report.json")).unwrap();
    assert_eq!(a, std::fs::read(seq.join("report.json")).unwrap());
    assert_eq!(
        std::fs::read(all.join("estimates.csv")).unwrap(),
        std::fs::read(seq.join("estimates.csv")).unwrap()
    );

    let o = run(&["run-all", "--config", cfg_all.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(a, std::fs::read(all.join("report.json")).unwrap());

    let r = report(&all);
    assert_eq!(r["per_characteristic"].as_array().unwrap().len(), 5);
    assert!(r["per_characteristic"][0]["coverage"].is_array());
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(all.join("manifest.json")).unwrap()).unwrap();
    let stages = manifest["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 4);
    assert!(stages.iter().all(|s| s["status"] == "ok"));
    assert!(all.join("events.jsonl").exists());
}

#[test]
fn forward_stage_accepts_observed_and_zero_statics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let out = tmp.path().join("fwd");
    let cfg = tmp.path().join("cfg.json");
    write_config(&cfg, &tiny_config(&data, &out, "bayesian"));
    for s in ["observed", "zeros"] {
        let o = run(&["train-forward", "--config", cfg.to_str().unwrap(), "--statics", s]);
        assert_eq!(code(&o), 0, "{s}: {}", stderr(&o));
        assert!(out.join("forward").join("summary.json").exists());
    }
    // Estimated statics need the export stage first.
    let o = run(&["train-forward", "--config", cfg.to_str().unwrap(), "--statics", "estimated"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"failed\""));
}
