use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[model]
word_dim = 8
hidden = 8
spatial_dim = 4
mask_grid = 8
mask_source_grid = 16
top_k = 3

[optimizer]
stage1_iters = 6
stage2_iters = 6
stage1_milestones = [4]
stage2_milestones = [4]
batch_size = 2

[data]
train = 6
val = 4
test = 4

[eval]
beta_step = 0.25
k_sweep = [2]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_graphground"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn parse_graph_recalls_clothing_relation() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("parse.json");
    fs::write(
        &input,
        r#"{
            "tokens": ["a", "man", "in", "a", "red", "hat"],
            "phrases": [
                {"id": 0, "span": [0, 2], "category": "people"},
                {"id": 1, "span": [3, 6], "category": "clothing"}
            ],
            "parse": {"nodes": [{"span": [0, 2]}, {"span": [3, 6]}], "edges": []}
        }"#,
    )
    .unwrap();
    let out = dir.path().join("graph.json");
    run(&["parse-graph", "--in", s(&input), "--out", s(&out)]);
    let graph: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(graph["nodes"].as_array().unwrap().len(), 2);
    let edges = graph["edges"].as_array().unwrap();
    assert_eq!(edges.len(), 1);
    assert_eq!(edges[0]["relation"], "wear");
    assert_eq!(edges[0]["subject"], 0);
    assert_eq!(edges[0]["object"], 1);
}

#[test]
fn parse_graph_rejects_bad_span() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("parse.json");
    fs::write(
        &input,
        r#"{"tokens": ["a"], "phrases": [{"id": 0, "span": [0, 3], "category": "other"}], "parse": {"nodes": [], "edges": []}}"#,
    )
    .unwrap();
    let out = bin().args(["parse-graph", "--in", s(&input), "--out", s(&dir.path().join("g.json"))]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&["gen", "--config", s(&cfg), "--out", s(&a)]);
    run(&["gen", "--config", s(&cfg), "--out", s(&b)]);
    for (name, lines) in [("train", 6), ("val", 4), ("test", 4)] {
        let x = fs::read(a.join(format!("{name}.jsonl"))).unwrap();
        let y = fs::read(b.join(format!("{name}.jsonl"))).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
        assert_eq!(String::from_utf8(x).unwrap().lines().count(), lines);
    }
    let train = fs::read_to_string(a.join("train.jsonl")).unwrap();
    let val = fs::read_to_string(a.join("val.jsonl")).unwrap();
    assert_ne!(train.lines().next(), val.lines().next());
}

#[test]
fn train_eval_ground_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    run(&["gen", "--config", s(&cfg), "--out", s(&data)]);

    let weights = dir.path().join("w.bin");
    let out = run(&["train", "--config", s(&cfg), "--out", s(&weights)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("val recall@1"));
    assert!(weights.exists());

    let test = data.join("test.jsonl");
    let out = run(&["eval", "--weights", s(&weights), "--data", s(&test), "--beta", "auto"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("recall@1"), "{text}");
    assert!(text.contains("people"), "{text}");
    let out = run(&["eval", "--weights", s(&weights), "--data", s(&test), "--beta", "0.3"]);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("beta 0.30"));

    let bad = bin().args(["eval", "--weights", s(&weights), "--data", s(&test), "--beta", "2"]).output().unwrap();
    assert!(!bad.status.success());

    let out = run(&["ground", "--weights", s(&weights), "--scene", s(&test), "--beta", "0.3"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["beta"], 0.3);
    let phrases = v["phrases"].as_array().unwrap();
    assert!(!phrases.is_empty());
    for p in phrases {
        assert_eq!(p["box"].as_array().unwrap().len(), 4);
        assert!(p["score"].as_f64().unwrap().is_finite());
    }
    assert!(v["objective"].as_f64().unwrap().is_finite());

    let out = run(&["ground", "--weights", s(&weights), "--scene", s(&test), "--no-sp", "--no-vogn"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["toggles"], "pgn+pp");
}

#[test]
fn json_weights_load_like_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    run(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    let weights = dir.path().join("w.json");
    run(&["train", "--config", s(&cfg), "--out", s(&weights)]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&weights).unwrap()).unwrap();
    assert_eq!(v["version"], 1);
    run(&["eval", "--weights", s(&weights), "--data", s(&data.join("val.jsonl"))]);
}

#[test]
fn ablate_writes_csv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("report.csv");
    run(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("config,toggles,K,beta,recall_at_1,people,"));
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "Baseline",
            "+PGN",
            "+PP",
            "+VOGN",
            "+SP",
            "w/o phrase relation feature",
            "w/o visual relation feature",
            "K=2",
            "K=3"
        ]
    );
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 13);
    }
}

#[test]
fn gradcheck_reports_each_tensor() {
    let out = run(&["gradcheck", "--op", "match_head", "--seed", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("match_head (seed 2): max relative error"));
    assert!(text.contains("head_cls.0.w"));
    assert!(text.contains("head_reg.1.b"), "{text}");

    let bad = bin().args(["gradcheck", "--op", "conv"]).output().unwrap();
    assert!(!bad.status.success());
}
