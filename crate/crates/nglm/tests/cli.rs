use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn nglm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_nglm")).args(args).output().unwrap();
    assert!(out.status.success(), "nglm {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn init_train_quantize_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (model, cfg, adapter, quant) = (d.join("m.nglm"), d.join("nglm.toml"), d.join("a.ngla"), d.join("q.ngq4"));
    let corpus = data("toy_qa.jsonl");

    nglm(&["init", "--preset", "tiny", "--out", s(&model), "--write-config", s(&cfg)]);
    let stats: serde_json::Value = serde_json::from_slice(&nglm(&["ingest", "--path", s(&corpus), "--strict"]).stdout).unwrap();
    assert_eq!(stats["records"], 32);

    let ckpt = d.join("ckpt");
    nglm(&[
        "train", "--model", s(&model), "--corpus", s(&corpus), "--steps", "6", "--probe-interval", "3", "--lr", "2e-3",
        "--beta2", "0.9", "--schedule", "linear", "--checkpoints", s(&ckpt), "--out", s(&adapter),
    ]);
    assert!(ckpt.join("step-000003.ngla").exists() && ckpt.join("step-000006.ngla").exists());
    let probes = std::fs::read_to_string(ckpt.join("probes.jsonl")).unwrap();
    assert!(probes.lines().count() >= 2);

    let q = nglm(&[
        "quantize", "--model", s(&model), "--adapter", s(&adapter), "--policy", "merge", "--out", s(&quant), "--eval", s(&corpus),
    ]);
    assert!(quant.exists(), "{}", String::from_utf8_lossy(&q.stderr));
    nglm(&["eval-ppl", "--quantized", s(&quant), "--corpus", s(&corpus)]);
    nglm(&["eval-ppl", "--model", s(&model), "--adapter", s(&adapter), "--corpus", s(&corpus)]);
    nglm(&["probe", "--model", s(&model), "--adapter", s(&adapter), "--max-new-tokens", "8"]);

    let mut child = Command::new(env!("CARGO_BIN_EXE_nglm"))
        .args(["chat", "--config", s(&cfg), "--max-new-tokens", "8", "--library", s(&data("toy_library.json"))])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all("我有哮喘\nhello\n".as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).matches("> ").count() >= 3);
}

#[test]
fn offline_translation_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let input = d.join("src.txt");
    std::fs::write(&input, "sore throat\nfever\n\ncough\n").unwrap();
    let (out, qa) = (d.join("pairs.jsonl"), d.join("qa.jsonl"));
    let args = [
        "translate", "--in", s(&input), "--out", s(&out), "--endpoint", "mock://uppercase", "--parallelism", "2", "--export", s(&qa),
    ];
    nglm(&args);
    let pairs = std::fs::read_to_string(&out).unwrap();
    assert_eq!(pairs.lines().count(), 3);
    assert!(pairs.contains("\"target\":\"FEVER\""));
    nglm(&args);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), pairs);
    let stats: serde_json::Value = serde_json::from_slice(&nglm(&["ingest", "--path", s(&qa), "--strict"]).stdout).unwrap();
    assert_eq!(stats["stats"]["synthetic"], 3);
}

#[test]
fn library_ingest_counts_terms() {
    let v: serde_json::Value = serde_json::from_slice(&nglm(&["ingest-library", "--path", s(&data("toy_library.json"))]).stdout).unwrap();
    assert_eq!(v["docs"], 20);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.nglm");
    std::fs::write(&bogus, b"nope").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nglm"))
        .args(["probe", "--model", s(&bogus)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).contains("panicked"));
}
