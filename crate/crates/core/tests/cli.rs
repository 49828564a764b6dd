use std::path::Path;
use std::process::{Command, Output};

fn sampfa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sampfa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = sampfa(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const CONFIG: &str = r#"{
  "dataset": {"sizes": [8, 10], "samples_per_size": 3},
  "model": {"n_max": 16, "d_model": 8, "layers": 1, "heads": 2, "gat_heads": 1, "ffn_width": 8},
  "schedule": {"stage1_epochs": 2, "stage2_epochs": 1},
  "train": {"lr": 0.003, "batch_size": 2},
  "workers": 1
}"#;

#[test]
fn solve_writes_a_converged_solution() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["solve", "--case", "ieee39", "--out", "sol.json"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("config:") && stderr.contains("seed:"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("sol.json")).unwrap()).unwrap();
    assert_eq!(v["report"]["converged"], true);
    assert_eq!(v["solution"]["v"].as_array().unwrap().len(), 39);
}

#[test]
fn stats_prints_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["stats", "--case", "ieee39"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "case,n_buses,n_branches,avg_degree,algebraic_connectivity,connected"
    );
    assert!(lines.next().unwrap().starts_with("ieee39,39,46,"));
}

#[test]
fn exit_codes_distinguish_input_and_numerical_failures() {
    let dir = tempfile::tempdir().unwrap();
    let missing = sampfa(dir.path(), &["solve", "--case", "missing.json"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing.json"));
    let noseed = sampfa(dir.path(), &["dataset", "--case", "ieee39", "--out", "d.jsonl"]);
    assert_eq!(noseed.status.code(), Some(1));
    let diverge = sampfa(dir.path(), &["solve", "--case", "ieee39", "--max-iter", "1", "--out", "s.json"]);
    assert_eq!(diverge.status.code(), Some(2));
    let bad_flag = sampfa(dir.path(), &["solve", "--bogus"]);
    assert_eq!(bad_flag.status.code(), Some(1));
}

#[test]
fn slice_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(dir.path(), &["slice", "--case", "ieee39", "--size", "12", "--seed", "4"]).stdout;
    let b = ok(dir.path(), &["slice", "--case", "ieee39", "--size", "12", "--seed", "4"]).stdout;
    assert_eq!(a, b);
    let rec: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(rec["network"]["buses"].as_array().unwrap().len(), 12);
}

#[test]
fn full_pipeline_runs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), CONFIG).unwrap();
    let cfg = ["--config", "cfg.json", "--case", "ieee39"];
    let with = |extra: &[&'static str]| -> Vec<&str> { cfg.iter().copied().chain(extra.iter().copied()).collect() };

    ok(d, &with(&["dataset", "--seed", "7", "--out", "a.jsonl"]));
    ok(d, &with(&["dataset", "--seed", "7", "--out", "b.jsonl", "--workers", "2"]));
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 6);
    assert!(d.join("a.jsonl.report.json").exists());

    ok(d, &with(&["train", "--seed", "1", "--dataset", "a.jsonl", "--checkpoint", "m.bin", "--out", "log.csv"]));
    ok(d, &with(&["train", "--seed", "1", "--dataset", "a.jsonl", "--checkpoint", "m2.bin", "--out", "log2.csv"]));
    assert_eq!(std::fs::read(d.join("m.bin")).unwrap(), std::fs::read(d.join("m2.bin")).unwrap());
    let log = std::fs::read_to_string(d.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().nth(3).unwrap().starts_with("3,2,"));

    ok(d, &with(&["infer", "--dataset", "a.jsonl", "--checkpoint", "m.bin", "--out", "pred.jsonl"]));
    assert_eq!(std::fs::read_to_string(d.join("pred.jsonl")).unwrap().lines().count(), 6);

    let rec = ok(d, &with(&["recover", "--dataset", "a.jsonl", "--predictions", "pred.jsonl"])).stdout;
    let first: serde_json::Value = serde_json::from_str(String::from_utf8(rec).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["theta"].as_array().unwrap().len(), 8);

    ok(d, &with(&["eval", "--dataset", "a.jsonl", "--predictions", "pred.jsonl", "--report", "eval.json", "--out", "per.csv"]));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(rep["samples"], 6);
    assert!(rep["accuracy"].as_f64().unwrap() >= 0.0);
    assert_eq!(std::fs::read_to_string(d.join("per.csv")).unwrap().lines().count(), 7);

    let from_ckpt = ok(d, &with(&["eval", "--dataset", "a.jsonl", "--checkpoint", "m.bin"])).stdout;
    let rep2: serde_json::Value = serde_json::from_slice(&from_ckpt).unwrap();
    assert_eq!(rep["mean_e_v"], rep2["mean_e_v"]);

    let bench = ok(d, &with(&["warmstart-bench", "--dataset", "a.jsonl", "--exact"])).stdout;
    let b: serde_json::Value = serde_json::from_slice(&bench).unwrap();
    assert_eq!(b["warm"]["mean_iterations"], 0.0);
    assert_eq!(b["warm"]["convergence_rate"], 1.0);
    ok(d, &with(&["warmstart-bench", "--dataset", "a.jsonl", "--checkpoint", "m.bin"]));
}
