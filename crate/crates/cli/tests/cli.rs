use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_postermaker")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_synth(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("synth.json");
    let body = json!({ "image_size": 32, "alphabet_size": 8, "max_chars": 3, "max_lines": 2 });
    std::fs::write(&cfg, body.to_string()).unwrap();
    cfg
}

#[test]
fn gradcheck_passes() {
    let o = run(&["gradcheck", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn invalid_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["train", "--config", p(&dir.path().join("none.json"))])), 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"stage": 1, "stepz": 3}"#).unwrap();
    assert_eq!(code(&run(&["train", "--config", p(&bad)])), 2);
    std::fs::write(&bad, r#"{"stage": 1, "lambda": -1}"#).unwrap();
    assert_eq!(code(&run(&["train", "--config", p(&bad)])), 2);
    assert_eq!(code(&run(&["synth-data", "--bogus"])), 2);
    assert_eq!(code(&run(&["evaluate", "--identity", "--data", p(&dir.path().join("x")), "--report", p(&bad)])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn synth_data_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(dir.path());
    for out in ["a", "b"] {
        let o = run(&["synth-data", "--out", p(&dir.path().join(out)), "--count", "6", "--seed", "9", "--config", p(&cfg)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut files: Vec<_> = std::fs::read_dir(dir.path().join("a/train")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert!(files.len() >= 19);
    for f in files {
        let a = std::fs::read(dir.path().join("a/train").join(&f)).unwrap();
        let b = std::fs::read(dir.path().join("b/train").join(&f)).unwrap();
        assert_eq!(a, b, "{f:?}");
    }
}

#[test]
fn identity_evaluation_reads_every_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(dir.path());
    assert_eq!(code(&run(&["synth-data", "--out", p(dir.path()), "--count", "10", "--config", p(&cfg)])), 0);
    let report = dir.path().join("report.json");
    let o = run(&["evaluate", "--identity", "--data", p(&dir.path().join("train")), "--report", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["sen_acc"], 1.0);
    assert_eq!(r["n_samples"], 10);
}

#[test]
fn train_then_generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(dir.path());
    assert_eq!(code(&run(&["synth-data", "--out", p(dir.path()), "--count", "8", "--config", p(&cfg)])), 0);
    let stage = json!({
        "stage": 1,
        "steps": 2,
        "batch_size": 2,
        "alphabet_size": 8,
        "image_size": 32,
        "from_scratch": true,
        "data_dir": dir.path().join("train"),
        "out_dir": dir.path().join("s1"),
        "model": { "patch": 8, "width": 16, "heads": 2, "mlp_ratio": 2, "base_blocks": 1, "scene_blocks": 1, "text_blocks": 1, "glyph_dim": 8 }
    });
    let sc = dir.path().join("stage.json");
    std::fs::write(&sc, stage.to_string()).unwrap();
    let o = run(&["train", "--config", p(&sc)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("s1/model.ckpt");
    let spec = dir.path().join("train/train-00000.json");
    let outs: Vec<Vec<u8>> = ["g1.png", "g2.png"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = run(&["generate", "--checkpoint", p(&ckpt), "--spec", p(&spec), "--out", p(&out), "--seed", "4", "--steps", "3"]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            std::fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let o = run(&["generate", "--checkpoint", p(&ckpt), "--spec", p(&dir.path().join("nope.json")), "--out", p(&dir.path().join("x.png"))]);
    assert_eq!(code(&o), 2);
}
