use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use scoped_core::cli::{read_reports, EXIT_DIMENSION, EXIT_MALFORMED, EXIT_ORACLE_CAP, EXIT_USAGE};

const SPEC: &str = r#"{
  "K": 2, "V": 12, "F": 4,
  "locale_count": 12, "train_locale_count": 20,
  "instances_per_locale": [3, 8],
  "eta_truth": "sample",
  "beta_concentration": 1.0, "phi_concentration": 0.3,
  "global_bag_size": 2, "local_bag_size": 1,
  "seed": 42
}"#;

fn scoped(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scoped"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = scoped(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline(dir: &Path, threads: &str) {
    fs::write(dir.join("spec.json"), SPEC).unwrap();
    ok(dir, &["synth", "--spec", "spec.json", "--out", "data"]);
    ok(dir, &["train", "--corpus", "data/train.jsonl", "--out", "nb"]);
    ok(dir, &["train", "--corpus", "data/train.jsonl", "--out", "me", "--kind", "maxent"]);
    for (algo, model) in [("global", "nb"), ("map_em", "nb"), ("variational", "nb"), ("cond_em", "me"), ("oracle", "nb")] {
        let out = format!("run/{algo}");
        ok(
            dir,
            &["infer", "--corpus", "data/test.jsonl", "--model", &format!("{model}/model.json"), "--algo", algo, "--out", &out, "--threads", threads],
        );
    }
    ok(
        dir,
        &["eval", "--corpus", "data/test.jsonl", "--predictions", "run/map_em/report.jsonl", "--baseline", "run/global/report.jsonl", "--out", "eval", "--recall", "0.5"],
    );
    ok(dir, &["oracle", "--corpus", "data/test.jsonl", "--model", "nb/model.json", "--out", "oracle", "--threads", threads]);
}

fn collect(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn pipeline_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir, "1");
    for f in [
        "data/test.jsonl",
        "data/train.jsonl",
        "data/truth.json",
        "data/manifest.json",
        "nb/model.json",
        "me/model.json",
        "run/map_em/report.jsonl",
        "run/map_em/manifest.json",
        "eval/curve.csv",
        "eval/baseline_curve.csv",
        "eval/summary.json",
        "oracle/oracle.jsonl",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let reports = read_reports(&dir.join("run/variational/report.jsonl")).unwrap();
    assert_eq!(reports.len(), 12);
    let ids: Vec<_> = reports.iter().map(|r| r.locale.clone()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("eval/summary.json")).unwrap()).unwrap();
    assert!(summary["accuracy"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["error_reductions"][0]["recall"].as_f64(), Some(0.5));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"].as_u64(), Some(42));
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "1");
    pipeline(b.path(), "4");
    let strip_threads = |files: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        files
            .into_iter()
            .map(|(name, bytes)| {
                if name.ends_with("manifest.json") {
                    let text = String::from_utf8(bytes).unwrap().replace("\"threads\": 4", "\"threads\": 1");
                    (name, text.into_bytes())
                } else {
                    (name, bytes)
                }
            })
            .collect()
    };
    assert_eq!(collect(a.path()), strip_threads(collect(b.path())));
}

#[test]
fn model_corpus_mismatch_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir, "1");
    fs::write(dir.join("spec2.json"), SPEC.replace("\"V\": 12", "\"V\": 13")).unwrap();
    ok(dir, &["synth", "--spec", "spec2.json", "--out", "other"]);
    let out = scoped(dir, &["infer", "--corpus", "other/test.jsonl", "--model", "nb/model.json", "--algo", "map_em", "--out", "x"]);
    assert_eq!(out.status.code(), Some(EXIT_DIMENSION));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
}

#[test]
fn oracle_cap_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir, "1");
    let out = scoped(dir, &["oracle", "--corpus", "data/test.jsonl", "--model", "nb/model.json", "--out", "o", "--oracle-cap", "4"]);
    assert_eq!(out.status.code(), Some(EXIT_ORACLE_CAP));
}

#[test]
fn usage_and_malformed_input_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(scoped(dir, &["infer", "--bogus"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(scoped(dir, &["nonsense"]).status.code(), Some(EXIT_USAGE));
    fs::write(dir.join("bad.jsonl"), "{\"K\":2,\"V\":3,\"F\":2}\n{not json\n").unwrap();
    let out = scoped(dir, &["train", "--corpus", "bad.jsonl", "--out", "m"]);
    assert_eq!(out.status.code(), Some(EXIT_MALFORMED));
}

#[test]
fn algorithm_needs_matching_model_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir, "1");
    let out = scoped(dir, &["infer", "--corpus", "data/test.jsonl", "--model", "nb/model.json", "--algo", "cond_em", "--out", "x"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}
