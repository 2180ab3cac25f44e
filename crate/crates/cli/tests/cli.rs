use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "name": "small",
  "dataset": {"synth": {"nodes": 60, "p_in": 0.2, "p_out": 0.02}},
  "embeddings": {"provider": "hash", "dim": 64},
  "attack": {"name": "dice", "ptb_rate": 0.3},
  "grids": {"beta": [2, 3], "gamma": [0.95], "k": [1, 3]},
  "edge_predictor": {"hidden": 16, "epochs": 20},
  "gnn": {"epochs": 50},
  "scorer": {"cache": "scores_cache.jsonl"}
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.json"), CONFIG).unwrap();
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphsieve"))
        .current_dir(dir)
        .args(["--config", "config.json", "--out-dir", "out", "--log-level", "warn"])
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pipeline_writes_reports() {
    let dir = setup();
    let o = run(dir.path(), &["--seeds", "3", "pipeline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 3);
    assert!(report["summary"]["purified_accuracy"]["std"].is_number());
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 3 + 2);
    assert!(rows[0].starts_with("attack,ptb_rate,seed,beta,gamma,k,"));
    assert!(rows[4].starts_with("dice,0.3,mean,"));
    assert!(rows[5].starts_with("dice,0.3,std,"));
    assert!(dir.path().join("scores_cache.jsonl").exists());
}

#[test]
fn staged_commands_chain() {
    let dir = setup();
    for args in [
        vec!["attack"],
        vec!["score-edges"],
        vec!["train-edge-predictor"],
        vec!["purify", "--beta", "3", "--gamma", "0.95", "--k", "3"],
        vec!["train-gnn", "--structure", "purified"],
    ] {
        let o = run(dir.path(), &args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let o = run(dir.path(), &["evaluate", "--structure", "purified"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let acc = eval["test_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let out = dir.path().join("out");
    for f in [
        "split.json",
        "attack.json",
        "scores.jsonl",
        "edge_predictor.json",
        "purification.json",
        "removed.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn beta_outside_grid_is_a_usage_error() {
    let dir = setup();
    assert!(run(dir.path(), &["attack"]).status.success());
    assert!(run(dir.path(), &["score-edges"]).status.success());
    let o = run(dir.path(), &["purify", "--beta", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("beta outside configured grid"), "{}", stderr(&o));
}

#[test]
fn replay_with_cold_cache_lists_missing_pairs() {
    let dir = setup();
    assert!(run(dir.path(), &["attack"]).status.success());
    let o = run(dir.path(), &["--backend", "replay", "score-edges"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("replay cache has no judgment for"), "{err}");
    assert!(err.contains("(0,"), "{err}");
}

#[test]
fn missing_artifact_names_the_producer() {
    let dir = setup();
    let o = run(dir.path(), &["train-gnn", "--structure", "attacked"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("graphsieve attack"), "{}", stderr(&o));
}

#[test]
fn usage_errors() {
    let dir = setup();
    assert_eq!(run(dir.path(), &["--no-such-flag", "pipeline"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["purify"]).status.code(), Some(1));
    std::fs::write(dir.path().join("config.json"), "{").unwrap();
    assert_eq!(run(dir.path(), &["attack"]).status.code(), Some(1));
    let help = Command::new(env!("CARGO_BIN_EXE_graphsieve"))
        .arg("--help")
        .output()
        .unwrap();
    assert_eq!(help.status.code(), Some(0));
}
