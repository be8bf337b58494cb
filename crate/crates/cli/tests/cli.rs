use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
env = "stage-4"
mode = "casil"
demos = 6
retained = [3, 6]
episodes = 4
out = "tiny"

[run]
seed = 3
embedding_dim = 8
token_buckets = 32
skill_embedding_dim = 4
memory_dim = 6
model_dim = 8
attention_heads = 2
batch_size = 16
truncation = 8
train_steps = 6
pretrain_steps = 4
pretrain_pairs = 32
pretrain_batch = 16
realign_steps = 1
"#;

fn casil(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casil"))
        .args(args)
        .env("CASIL_RUN_ROOT", root)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn root() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn bad_flags_exit_with_two() {
    let dir = root();
    assert_eq!(code(&casil(dir.path(), &["train", "--bogus"])), 2);
    assert_eq!(code(&casil(dir.path(), &["sweep", "sideways"])), 2);
    assert_eq!(code(&casil(dir.path(), &["gen-demos", "--env", "stage-5", "--n", "2", "--out", "d"])), 2);
    assert_eq!(code(&casil(dir.path(), &["--help"])), 0);
}

#[test]
fn bad_config_and_missing_inputs_exit_with_two() {
    let dir = root();
    std::fs::write(dir.path().join("typo.toml"), TINY.replace("episodes", "episodez")).unwrap();
    let typo = dir.path().join("typo.toml");
    assert_eq!(code(&casil(dir.path(), &["train", "--config", typo.to_str().unwrap()])), 2);
    let eval = casil(dir.path(), &["eval", "--checkpoint", "nowhere.json", "--env", "stage-4"]);
    assert_eq!(code(&eval), 2);
    let tiny = dir.path().join("tiny.toml");
    assert_eq!(code(&casil(dir.path(), &["train", "--config", tiny.to_str().unwrap(), "--data", "nothing"])), 2);
    assert_eq!(code(&casil(dir.path(), &["plot", "--kind", "epsilon", "--input", "nothing", "--out", "p"])), 2);
}

#[test]
fn demos_train_eval_under_the_run_root() {
    let dir = root();
    let tiny = dir.path().join("tiny.toml");
    let g = casil(dir.path(), &["gen-demos", "--env", "stage-4", "--n", "6", "--out", "demos"]);
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    assert!(dir.path().join("demos/dataset.jsonl").is_file());
    assert!(dir.path().join("demos/boundaries.json").is_file());

    let t = casil(dir.path(), &["train", "--config", tiny.to_str().unwrap(), "--data", "demos"]);
    assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    for f in ["checkpoint.json", "train_log.jsonl", "run.toml", "experiment.toml"] {
        assert!(dir.path().join("tiny").join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("tiny/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let e = casil(
        dir.path(),
        &["eval", "--checkpoint", "tiny/checkpoint.json", "--env", "stage-4", "--episodes", "3", "--out", "tiny/eval.json"],
    );
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("tiny/eval.json")).unwrap()).unwrap();
    assert_eq!(report["episodes"], 3);

    // a checkpoint evaluated on the wrong task is a usage error
    let wrong = casil(dir.path(), &["eval", "--checkpoint", "tiny/checkpoint.json", "--env", "corridor"]);
    assert_eq!(code(&wrong), 2);
}

#[test]
fn training_twice_writes_identical_logs() {
    let dir = root();
    let tiny = dir.path().join("tiny.toml");
    for out in ["a", "b"] {
        let t = casil(dir.path(), &["train", "--config", tiny.to_str().unwrap(), "--out", out]);
        assert_eq!(code(&t), 0, "{}", String::from_utf8_lossy(&t.stderr));
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/train_log.jsonl"), read("b/train_log.jsonl"));
    assert_eq!(read("a/checkpoint.json"), read("b/checkpoint.json"));
}

#[test]
fn sweep_then_plot() {
    let dir = root();
    let tiny = dir.path().join("tiny.toml");
    let s = casil(
        dir.path(),
        &["sweep", "data-drop", "--config", tiny.to_str().unwrap(), "--seeds", "0", "--modes", "casil,bc", "--out", "dd"],
    );
    assert_eq!(code(&s), 0, "{}", String::from_utf8_lossy(&s.stderr));
    for f in ["sweep.json", "cells.jsonl", "table.txt", "run.toml"] {
        assert!(dir.path().join("dd").join(f).is_file(), "{f}");
    }
    let cells = std::fs::read_to_string(dir.path().join("dd/cells.jsonl")).unwrap();
    assert_eq!(cells.lines().count(), 4);

    let p = casil(dir.path(), &["plot", "--kind", "data-drop", "--input", "dd", "--out", "plots"]);
    assert_eq!(code(&p), 0, "{}", String::from_utf8_lossy(&p.stderr));
    let svg = std::fs::read_to_string(dir.path().join("plots/data-drop-stage-4-easy.svg")).unwrap();
    assert!(svg.starts_with("<svg"));

    let wrong = casil(dir.path(), &["plot", "--kind", "epsilon", "--input", "dd", "--out", "plots"]);
    assert_eq!(code(&wrong), 2);
}
