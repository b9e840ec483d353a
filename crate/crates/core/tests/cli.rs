use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn divrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divrank")).args(args).env_remove("DIVRANK_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = divrank(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn fail(args: &[&str]) -> (i32, Value) {
    let out = divrank(args);
    assert!(!out.status.success(), "{args:?} succeeded");
    (out.status.code().unwrap(), serde_json::from_slice(&out.stderr).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] =
    ["--requests", "40", "--candidates", "24", "--categories", "8", "--users", "20", "--catalog-size", "300"];

const QUICK: [&str; 15] = [
    "--d", "6", "--hidden", "8", "4", "--k", "3", "--warm-epochs", "1", "--batch-size", "8",
    "--targets-per-request", "8", "--valid-fraction", "0.25",
];

fn gen(dir: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let mut args = vec!["gen-data", "--out", p(&out), "--seed", seed];
    args.extend(SMALL);
    ok(&args);
    out
}

fn train_into(data: &Path, out: &Path, epochs: &str) -> Value {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--epochs", epochs];
    args.extend(QUICK);
    ok(&args)
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", "3");
    let b = gen(dir.path(), "b.jsonl", "3");
    let c = gen(dir.path(), "c.jsonl", "4");
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_ne!(text, std::fs::read_to_string(&c).unwrap());
    assert_eq!(text.lines().count(), 40);

    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a.jsonl.run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 1);
}

#[test]
fn refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", "0");
    let mut args = vec!["gen-data", "--out", p(&a)];
    args.extend(SMALL);
    let (code, err) = fail(&args);
    assert_eq!(code, 1);
    assert_eq!(err["error"], "exists");
    args.push("--force");
    ok(&args);
}

#[test]
fn bad_arguments_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    let (code, err) = fail(&["gen-data", "--out", p(&out), "--candidates", "1"]);
    assert_eq!(code, 1);
    assert_eq!(err["error"], "config");
    assert!(!out.exists());

    let (code, err) = fail(&["train", "--data", p(&out), "--lambda", "-1"]);
    assert_eq!(code, 1);
    assert!(err["message"].as_str().unwrap().contains("lambda"), "{err}");

    let (code, err) = fail(&["rank", "--no-such-flag"]);
    assert_eq!(code, 2);
    assert_eq!(err["error"], "usage");

    let (code, err) = fail(&["evaluate", "--model", p(dir.path()), "--data", p(&out)]);
    assert_eq!(code, 1);
    assert_eq!(err["error"], "io");
}

#[test]
fn train_evaluate_rank_bench() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data.jsonl", "1");
    let run = dir.path().join("run");
    let manifest = train_into(&data, &run, "2");
    assert_eq!(manifest["command"], "train");
    for f in ["config.json", "vocab.json", "manifest.json", "weights.bin", "history.json", "run.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let history: Value = serde_json::from_slice(&std::fs::read(run.join("history.json")).unwrap()).unwrap();
    assert_eq!(history["epochs"].as_array().unwrap().len(), 3);

    let again = dir.path().join("again");
    train_into(&data, &again, "2");
    for f in ["history.json", "weights.bin", "manifest.json", "config.json", "vocab.json"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }

    let reports = ok(&["evaluate", "--model", p(&run), "--data", p(&data), "--k", "5,10", "--gamma", "0,0.1,0.2"]);
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 6);
    for r in reports {
        assert_eq!(r["requests"], 40);
        let ilad = r["ilad"].as_f64().unwrap();
        let cc = r["cc"].as_f64().unwrap();
        assert!((0.0..=2.0).contains(&ilad) && cc > 0.0 && cc <= 1.0, "{r}");
    }

    let ranked = ok(&["rank", "--model", p(&run), "--data", p(&data), "--k", "7", "--gamma", "0.1"]);
    let lists = ranked["lists"].as_array().unwrap();
    assert_eq!(lists.len(), 40);
    assert!(ranked["errors"].as_array().unwrap().is_empty());

    let out = dir.path().join("rank.json");
    ok(&["rank", "--model", p(&run), "--data", p(&data), "--out", p(&out)]);
    let written: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(written["k"], 20);
    assert!(dir.path().join("rank.json.run.json").is_file());

    let bench = ok(&["bench", "--model", p(&run), "--n", "400", "--topk", "10", "--repeat", "1"]);
    assert_eq!(bench["n"], 400);
    assert!(bench["teacher_similarity_evals"].as_u64().unwrap() > 0);
    assert!(bench["student_comparisons"].as_u64().unwrap() > 0);
    assert!(bench["env"]["threads"].as_u64().unwrap() == 1);
}

#[test]
fn zero_joint_epochs_keep_the_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data.jsonl", "2");
    let run = dir.path().join("run");
    train_into(&data, &run, "0");
    let history: Value = serde_json::from_slice(&std::fs::read(run.join("history.json")).unwrap()).unwrap();
    let epochs = history["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 1);
    assert_eq!(epochs[0]["phase"], "warm");
    assert!(history["best_joint_epoch"].is_null());
}
