//! End-to-end behaviour of the command-line tool.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hyperode-rca"));
    c.env("RUST_LOG", "warn").env_remove("RCA_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, name: &str, seed: u64, services: usize, incidents: usize) -> PathBuf {
    let path = dir.join(name);
    let out = run(&[
        "generate",
        "--seed",
        &seed.to_string(),
        "--services",
        &services.to_string(),
        "--incidents",
        &incidents.to_string(),
        "--out",
        p(&path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

const SMALL_MODEL: &str = r#""model": {"d_model": 8, "heads": 2, "d_final": 8, "d_z": 4, "candidate_dim": 6,
    "bilinear_rank": 6, "hash_dim": 8, "n_templates": 4, "ode_dim": 4, "ode_hidden": 6, "ode_time_dim": 4}"#;

fn write_config(dir: &Path, dataset: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{"dataset": "{}", "epochs": 2, "lr": 0.003, "train_splits": ["train", "val", "test"], {SMALL_MODEL}{extra}}}"#,
        p(dataset)
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

#[test]
fn generate_is_reproducible_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.ndjson", 7, 4, 100);
    let b = generate(dir.path(), "b.ndjson", 7, 4, 100);
    assert_eq!(sha(&a), sha(&b));
    let lines = std::fs::read_to_string(&a).unwrap().lines().count();
    assert_eq!(lines, 101);
}

#[test]
fn too_few_services_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["generate", "--services", "2", "--incidents", "5", "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("absent.ndjson"), "");
    let out = run(&["train", "--config", p(&cfg), "--out-checkpoint", p(&dir.path().join("ck.json"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.ndjson"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "d.ndjson", 1, 4, 4);
    let cfg = write_config(dir.path(), &data, r#", "learning_rate": 0.1"#);
    let out = run(&["train", "--config", p(&cfg), "--out-checkpoint", p(&dir.path().join("ck.json"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_seed_variable_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "d.ndjson", 1, 4, 4);
    let cfg = write_config(dir.path(), &data, "");
    let out = bin()
        .args(["train", "--config", p(&cfg), "--out-checkpoint", p(&dir.path().join("ck.json"))])
        .env("RCA_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn train_eval_explain_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = generate(d, "d.ndjson", 3, 5, 6);
    let cfg = write_config(d, &data, "");
    let ck = d.join("ck.json");
    let hist = d.join("history.json");
    let out = run(&["train", "--config", p(&cfg), "--out-checkpoint", p(&ck), "--history", p(&hist)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    // the checkpoint maps parameter paths to shape and data
    let ckv: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ck).unwrap()).unwrap();
    let w_v = &ckv["hyper.layer0.W_v"];
    assert_eq!(w_v["shape"], serde_json::json!([8, 8]));
    assert_eq!(w_v["data"].as_array().unwrap().len(), 64);
    let history: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&hist).unwrap()).unwrap();
    assert_eq!(history.as_array().unwrap().len(), 2);

    let report = d.join("report.json");
    let out = run(&[
        "eval", "--checkpoint", p(&ck), "--dataset", p(&data), "--report", p(&report), "--config", p(&cfg),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["f1", "precision", "recall", "mcc", "auc", "mrr", "n_incidents", "per_fault_type"] {
        assert!(rep.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(rep["n_incidents"], 6);

    let ex = d.join("explain.json");
    let out = run(&[
        "explain", "--checkpoint", p(&ck), "--dataset", p(&data), "--incident-id", "2", "--out", p(&ex), "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let exv: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ex).unwrap()).unwrap();
    let hyperedges = exv["hyperedges"].as_array().unwrap();
    assert!(!hyperedges.is_empty());
    for h in hyperedges {
        for v in h["soft_values"].as_array().unwrap() {
            let v = v.as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(h["logit"].is_number());
    }
    for key in ["attention", "onsets", "routing", "pooling"] {
        assert!(exv.get(key).is_some(), "explanation lacks {key}");
    }
    check_bipartite_dot(&std::fs::read_to_string(d.join("explain.dot")).unwrap());

    let out = run(&[
        "explain", "--checkpoint", p(&ck), "--dataset", p(&data), "--incident-id", "999", "--out", p(&ex), "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&out), 2);
}

/// Every edge joins a `v*` vertex node to an `e*` hyperedge node, and every
/// node used by an edge is declared.
fn check_bipartite_dot(dot: &str) {
    let lines: Vec<&str> = dot.lines().map(str::trim).collect();
    assert!(lines[0].starts_with("graph ") && lines[0].ends_with('{'));
    assert_eq!(*lines.last().unwrap(), "}");
    let mut declared = std::collections::HashSet::new();
    for l in &lines[1..lines.len() - 1] {
        if l.contains("--") {
            let (a, rest) = l.split_once(" -- ").expect("edge syntax");
            let b = rest.split_whitespace().next().unwrap();
            assert!(a.starts_with('v') && b.starts_with('e'), "{l}");
            assert!(declared.contains(a) && declared.contains(b), "{l}");
        } else if let Some((name, _)) = l.split_once(' ') {
            if name.starts_with('v') || name.starts_with('e') {
                declared.insert(name.to_string());
            }
        }
    }
}

#[test]
fn vocabulary_mismatch_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = generate(d, "d.ndjson", 3, 4, 4);
    let other = generate(d, "o.ndjson", 3, 6, 4);
    let cfg = write_config(d, &data, "");
    let ck = d.join("ck.json");
    assert_eq!(code(&run(&["train", "--config", p(&cfg), "--out-checkpoint", p(&ck)])), 0);
    let out = run(&[
        "eval", "--checkpoint", p(&ck), "--dataset", p(&other), "--report", p(&d.join("r.json")), "--config",
        p(&cfg),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = generate(d, "d.ndjson", 3, 4, 4);
    let cfg = write_config(d, &data, r#", "seed": 5"#);
    let train = |name: &str, seed: Option<&str>| {
        let ck = d.join(name);
        let mut c = bin();
        c.args(["train", "--config", p(&cfg), "--out-checkpoint", p(&ck)]);
        if let Some(s) = seed {
            c.env("RCA_SEED", s);
        }
        assert_eq!(code(&c.output().unwrap()), 0);
        sha(&ck)
    };
    let plain = train("a.json", None);
    assert_eq!(plain, train("b.json", Some("5")));
    assert_ne!(plain, train("c.json", Some("6")));
}
