//! End-to-end tests of the `pharos` binary: exit codes, the degenerate
//! steps-0 attack, report ordering, re-aggregation, and manifest contents.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

use pharos_core::retrieval::MetricsReport;

const BIN: &str = env!("CARGO_BIN_EXE_pharos");

/// A small recipe so binary round-trips stay fast.
const TINY: &str = r#"{
  "dataset": {"classes": 4, "dim": 16, "n_train": 200, "n_db": 400, "n_query": 40},
  "model": {"bits": 16, "hidden": [32],
            "train": {"epochs": 30, "batch_size": 16,
                      "quant_weight": 0.01, "learning_rate": 0.02}},
  "attack": {"steps": 10},
  "eval": {"topn": 100, "pn_grid": [1, 5, 10]}
}"#;

fn pharos(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pharos(args);
    assert!(
        out.status.success(),
        "pharos {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &TempDir) -> (String, String) {
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    (
        cfg.to_str().unwrap().to_string(),
        out.to_str().unwrap().to_string(),
    )
}

fn map_from(out: &str, tag: &str) -> f64 {
    let text = fs::read_to_string(Path::new(out).join(format!("metrics_{tag}.json"))).unwrap();
    let metrics: MetricsReport = serde_json::from_str(&text).unwrap();
    metrics.map
}

#[test]
fn usage_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    let (_, out) = setup(&dir);

    let bad_flag = pharos(&["gen-data", "--no-such-flag", "--out", &out]);
    assert_eq!(bad_flag.status.code(), Some(1));

    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"dataset": {"classez": 4}}"#).unwrap();
    let bad_config = pharos(&["gen-data", "--config", bad_cfg.to_str().unwrap(), "--out", &out]);
    assert_eq!(bad_config.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&bad_config.stderr);
    assert!(stderr.contains("classez"), "error must name the offending field: {stderr}");

    let bad_method = pharos(&["attack", "--method", "nope", "--out", &out]);
    assert_eq!(bad_method.status.code(), Some(1));

    let bad_eta = pharos(&["attack", "--epsilon", "1/255", "--eta", "8/255", "--out", &out]);
    assert_eq!(bad_eta.status.code(), Some(1));
}

#[test]
fn missing_artifacts_exit_2_with_actionable_message() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = setup(&dir);

    let no_data = pharos(&["train", "--config", &cfg, "--out", &out]);
    assert_eq!(no_data.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&no_data.stderr);
    assert!(stderr.contains("dataset.phf"), "must name the missing file: {stderr}");

    ok(&["gen-data", "--config", &cfg, "--out", &out]);
    let no_model = pharos(&["attack", "--config", &cfg, "--out", &out]);
    assert_eq!(no_model.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&no_model.stderr);
    assert!(stderr.contains("model.phm"), "must name the missing file: {stderr}");
}

#[test]
fn pipeline_report_ordering_and_reaggregation() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = setup(&dir);
    ok(&["gen-data", "--config", &cfg, "--out", &out]);
    ok(&["train", "--config", &cfg, "--out", &out]);
    ok(&["encode", "--config", &cfg, "--out", &out]);
    ok(&["eval", "--config", &cfg, "--out", &out, "--attack", "clean"]);
    for method in ["hag", "pga-dagger", "pga"] {
        ok(&["attack", "--config", &cfg, "--out", &out, "--method", method]);
        ok(&["eval", "--config", &cfg, "--out", &out, "--attack", method]);
    }
    ok(&["report", "--config", &cfg, "--out", &out]);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join("report.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["attack"], "clean", "clean row must come first");
    let maps: Vec<f64> = rows[1..]
        .iter()
        .map(|r| r["map"].as_f64().unwrap())
        .collect();
    for pair in maps.windows(2) {
        assert!(pair[0] >= pair[1], "attack rows must be MAP-descending: {maps:?}");
    }

    // independent re-aggregation: every row's MAP equals the mean of the
    // per-query APs in its metrics file
    for row in rows {
        let tag = row["tag"].as_str().unwrap();
        let text =
            fs::read_to_string(Path::new(&out).join(format!("metrics_{tag}.json"))).unwrap();
        let metrics: MetricsReport = serde_json::from_str(&text).unwrap();
        let mean =
            metrics.per_query_ap.iter().sum::<f64>() / metrics.per_query_ap.len() as f64;
        assert!((row["map"].as_f64().unwrap() - mean).abs() < 1e-12);
    }

    // csv mirrors the json rows
    let csv = fs::read_to_string(Path::new(&out).join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("tag,attack,map,queries,topn"));
    assert_eq!(lines.count(), rows.len());
}

#[test]
fn steps_zero_attack_stays_within_noise_of_clean() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = setup(&dir);
    ok(&["gen-data", "--config", &cfg, "--out", &out]);
    ok(&["train", "--config", &cfg, "--out", &out]);
    ok(&["eval", "--config", &cfg, "--out", &out, "--attack", "clean"]);
    ok(&[
        "attack", "--config", &cfg, "--out", &out, "--method", "pga", "--steps", "0", "--tag",
        "pga0",
    ]);
    ok(&["eval", "--config", &cfg, "--out", &out, "--attack", "pga0"]);
    let clean = map_from(&out, "clean");
    let noised = map_from(&out, "pga0");
    assert!(
        (clean - noised).abs() < 0.1,
        "steps-0 attack moved MAP from {clean:.4} to {noised:.4}"
    );
}

#[test]
fn manifests_record_checksums_and_exact_rationals() {
    let dir = TempDir::new().unwrap();
    let (cfg, out) = setup(&dir);
    ok(&["gen-data", "--config", &cfg, "--out", &out]);
    ok(&["train", "--config", &cfg, "--out", &out]);
    ok(&[
        "attack", "--config", &cfg, "--out", &out, "--method", "pga", "--epsilon", "16/255",
        "--eta", "2/255",
    ]);

    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(Path::new(&out).join("attack_pga.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config"]["epsilon"], "16/255");
    assert_eq!(manifest["config"]["eta"], "2/255");
    let inputs = manifest["inputs"].as_object().unwrap();
    for name in ["dataset.phf", "model.phm"] {
        let digest = inputs[name].as_str().unwrap();
        assert_eq!(digest.len(), 64, "{name} checksum must be sha-256 hex");
        assert!(digest.chars().all(|c| c.is_ascii_hexdigit()));
    }

    // the adversarial file echoes the exact budget too
    let adv = fs::read(Path::new(&out).join("adv_pga.pha")).unwrap();
    let header_len = u32::from_le_bytes(adv[..4].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&adv[4..4 + header_len]).unwrap();
    assert_eq!(header["epsilon"], "16/255");
}

#[test]
fn seed_flag_changes_artifacts_and_same_seed_reproduces() {
    let dir = TempDir::new().unwrap();
    let (cfg, _) = setup(&dir);
    let mk = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let out = out.to_str().unwrap().to_string();
        ok(&["gen-data", "--config", &cfg, "--out", &out, "--seed", seed]);
        fs::read(Path::new(&out).join("dataset.phf")).unwrap()
    };
    let a = mk("s7a", "7");
    let b = mk("s7b", "7");
    let c = mk("s8", "8");
    assert_eq!(a, b, "same seed must reproduce the dataset byte-for-byte");
    assert_ne!(a, c, "different seeds must differ");
}
