use std::path::Path;
use std::process::{Command, Output};

use sen::runlog::read_jsonl;
use sen::synth::write_json;
use sen_core::config::ExperimentConfig;
use sen_core::losses::ComponentFlags;
use sen_core::retrieval::MetricsReport;
use tempfile::tempdir;

fn sen(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_sen")).args(args).current_dir(cwd).output().expect("spawn sen");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = sen(args, cwd);
    assert!(out.status.success(), "sen {args:?} failed");
    String::from_utf8(out.stdout).unwrap()
}

fn gen_data(dir: &Path, name: &str) {
    std::fs::write(dir.join("spec.json"), r#"{"num_identities": 12, "images_per_identity": 3, "seed": 3, "test_identities": 4}"#)
        .unwrap();
    ok(&["gen-data", "--spec", "spec.json", "--out", name], dir);
}

fn config(dir: &Path, name: &str, flags: ComponentFlags) {
    let mut cfg = ExperimentConfig::toy();
    cfg.components = flags;
    write_json(&dir.join(name), &cfg).unwrap();
}

#[test]
fn train_eval_retrieve_round_trip() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    gen_data(dir, "data");
    config(dir, "sen.json", ComponentFlags::default());
    ok(&["train", "--config", "sen.json", "--data", "data", "--out", "run", "--steps", "12", "--checkpoint-every", "5"], dir);
    for f in ["train_log.jsonl", "final.ckpt", "step_000005.ckpt", "step_000010.ckpt", "metrics.json"] {
        assert!(dir.join("run").join(f).is_file(), "{f}");
    }

    let log = read_jsonl(&dir.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.len(), 12);
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert!(log.iter().all(|l| keys(l) == keys(&log[0])));
    assert_eq!(keys(&log[0]), ["l_cmt", "l_id", "l_sdm", "l_tir", "lr", "step", "total"]);

    // Evaluating the saved model reproduces the metrics logged at the end of training.
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("run/metrics.json")).unwrap()).unwrap();
    let logged: MetricsReport = serde_json::from_value(summary["train"].clone()).unwrap();
    ok(&["eval", "--ckpt", "run/final.ckpt", "--split", "train", "--json", "train_eval.json"], dir);
    let eval: MetricsReport = serde_json::from_str(&std::fs::read_to_string(dir.join("train_eval.json")).unwrap()).unwrap();
    assert!((eval.rank1 - logged.rank1).abs() <= 1e-3);
    let table = ok(&["eval", "--ckpt", "run/final.ckpt", "--split", "test", "--data", "data"], dir);
    for col in ["Rank-1", "Rank-5", "Rank-10", "mAP", "mINP"] {
        assert!(table.contains(col), "{table}");
    }

    // No val split in this dataset.
    let out = sen(&["eval", "--ckpt", "run/final.ckpt", "--split", "val"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));

    let out = sen(&["retrieve", "--ckpt", "run/final.ckpt", "--cache", "test.cache", "--query", "red shirt"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sen build-cache"));

    ok(&["build-cache", "--ckpt", "run/final.ckpt", "--split", "test", "--out", "test.cache"], dir);
    let query = ["retrieve", "--ckpt", "run/final.ckpt", "--cache", "test.cache", "--query", "a person in a red shirt", "--top-k", "50", "--json"];
    let first: serde_json::Value = serde_json::from_str(&ok(&query, dir)).unwrap();
    let hits = first["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 12, "top-k clamps to the 12 test images");
    assert!(hits[0]["path"].as_str().unwrap().starts_with("images/"));
    let second: serde_json::Value = serde_json::from_str(&ok(&query, dir)).unwrap();
    assert_eq!(first["hits"], second["hits"]);
}

#[test]
fn baseline_logs_only_sdm_and_id_and_is_deterministic() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    gen_data(dir, "data");
    config(dir, "base.json", ComponentFlags::baseline());
    for run in ["a", "b"] {
        ok(&["train", "--config", "base.json", "--data", "data", "--out", run, "--steps", "6", "--checkpoint-every", "0"], dir);
    }
    let log = read_jsonl(&dir.join("a/train_log.jsonl")).unwrap();
    for line in &log {
        let keys: Vec<&str> = line.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["l_id", "l_sdm", "lr", "step", "total"]);
    }
    assert_eq!(
        std::fs::read(dir.join("a/train_log.jsonl")).unwrap(),
        std::fs::read(dir.join("b/train_log.jsonl")).unwrap()
    );
    assert!(!dir.join("a/step_000005.ckpt").exists());
}

#[test]
fn gen_data_is_byte_identical_and_rejects_bad_specs() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    gen_data(dir, "one");
    gen_data(dir, "two");
    let a = sen::synth::list_files(&dir.join("one")).unwrap();
    assert_eq!(a, sen::synth::list_files(&dir.join("two")).unwrap());
    for f in &a {
        assert_eq!(std::fs::read(dir.join("one").join(f)).unwrap(), std::fs::read(dir.join("two").join(f)).unwrap());
    }
    std::fs::write(dir.join("bad.json"), r#"{"num_identities": 0, "images_per_identity": 2, "seed": 1}"#).unwrap();
    assert!(!sen(&["gen-data", "--spec", "bad.json", "--out", "bad"], dir).status.success());
}

#[test]
fn ablate_and_argument_errors() {
    let tmp = tempdir().unwrap();
    let dir = tmp.path();
    gen_data(dir, "data");
    let out = ok(&["ablate", "--axis", "decoder_variant", "--data", "data", "--steps", "1", "--out", "abl.json"], dir);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 4, "{out}");
    assert!(rows[0].starts_with("decoder_variant") && rows[1].starts_with("cross") && rows[3].starts_with("concat"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("abl.json")).unwrap()).unwrap();
    assert_eq!(report["axis"], "decoder_variant");

    assert!(!sen(&["ablate", "--axis", "width", "--data", "data"], dir).status.success());
    let out = sen(&["train", "--config", "toy", "--data", "data", "--pos-words", "gerund=x.txt"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown word class"));
}
