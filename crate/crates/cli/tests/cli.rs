//! Command-level checks: exit codes, file outputs, and JSON shapes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bido_core::corpus::{build_synthetic_dex_with_record, SampleSpec};
use bido_core::imaging::decode_image;

fn bido() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bido"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn bido")
}

fn assert_exit(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: stdout={} stderr={}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_sample_dex(dir: &Path) -> (std::path::PathBuf, bido_core::dex::DexHeader) {
    let spec = SampleSpec::default_malicious(31);
    let (raw, record) = build_synthetic_dex_with_record(&spec).unwrap();
    let path = dir.join("sample.dex");
    fs::write(&path, &raw).unwrap();
    (path, record.header)
}

#[test]
fn convert_dex_writes_decodable_png() {
    let dir = tempfile::tempdir().unwrap();
    let (dex, _) = write_sample_dex(dir.path());
    let out = dir.path().join("sample.png");
    let result = run(bido()
        .args(["convert", "--kind", "dex", "--width", "64", "--height", "64", "-o"])
        .arg(&out)
        .arg(&dex));
    assert_exit(&result, 0, "convert");
    let png = fs::read(&out).unwrap();
    let img = decode_image(&png).unwrap();
    assert_eq!((img.geometry.width, img.geometry.height), (64, 64));
}

#[test]
fn convert_strict_accepts_builder_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let (dex, _) = write_sample_dex(dir.path());
    let out = dir.path().join("x.png");
    let result = run(bido()
        .args(["convert", "--kind", "dex", "--strict", "-o"])
        .arg(&out)
        .arg(&dex));
    assert_exit(&result, 0, "convert --strict");
}

#[test]
fn convert_bad_magic_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dex");
    fs::write(&bad, vec![0u8; 200]).unwrap();
    let result = run(bido().args(["convert", "--kind", "dex"]).arg(&bad));
    assert_exit(&result, 2, "bad magic");
}

#[test]
fn convert_missing_file_exits_3() {
    let result = run(bido().args(["convert", "--kind", "dex", "/nonexistent/x.dex"]));
    assert_exit(&result, 3, "missing input");
}

#[test]
fn convert_batch_with_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let mut inputs = Vec::new();
    for i in 0..4u64 {
        let spec = SampleSpec::default_benign(100 + i);
        let (raw, _) = build_synthetic_dex_with_record(&spec).unwrap();
        let p = dir.path().join(format!("f{i}.dex"));
        fs::write(&p, raw).unwrap();
        inputs.push(p);
    }
    let out_dir = dir.path().join("imgs");
    let mut cmd = bido();
    cmd.args(["convert", "--kind", "dex", "--jobs", "3", "--out-dir"])
        .arg(&out_dir);
    for i in &inputs {
        cmd.arg(i);
    }
    assert_exit(&run(&mut cmd), 0, "batch convert");
    for i in 0..4 {
        assert!(out_dir.join(format!("f{i}.dex.png")).exists());
    }
}

#[test]
fn gen_corpus_smoke_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let result = run(bido()
            .args(["gen-corpus", "--n", "4", "--seed", "9", "--out"])
            .arg(out));
        assert_exit(&result, 0, "gen-corpus");
    }
    assert_eq!(
        fs::read(a.join("manifest.jsonl")).unwrap(),
        fs::read(b.join("manifest.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("img/s00001_dex.png")).unwrap(),
        fs::read(b.join("img/s00001_dex.png")).unwrap()
    );
}

#[test]
fn env_seed_fallback_matches_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (by_flag, by_env) = (dir.path().join("flag"), dir.path().join("env"));
    assert_exit(
        &run(bido()
            .args(["gen-corpus", "--n", "3", "--seed", "42", "--out"])
            .arg(&by_flag)),
        0,
        "seed flag",
    );
    assert_exit(
        &run(bido()
            .env("BIDO_SEED", "42")
            .args(["gen-corpus", "--n", "3", "--out"])
            .arg(&by_env)),
        0,
        "seed env",
    );
    assert_eq!(
        fs::read(by_flag.join("manifest.jsonl")).unwrap(),
        fs::read(by_env.join("manifest.jsonl")).unwrap()
    );
}

#[test]
fn train_smoke_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert_exit(
        &run(bido()
            .args(["gen-corpus", "--n", "12", "--seed", "5", "--out"])
            .arg(&corpus)),
        0,
        "gen",
    );
    let model = dir.path().join("model.bido");
    let history = dir.path().join("history.jsonl");
    let result = run(bido()
        .args(["train", "--epochs", "1", "--k", "4", "--rank", "2", "--seed", "3"])
        .arg("--corpus")
        .arg(&corpus)
        .arg("--out")
        .arg(&model)
        .arg("--history")
        .arg(&history));
    assert_exit(&result, 0, "train");
    assert!(model.exists());
    let history_text = fs::read_to_string(&history).unwrap();
    let first: serde_json::Value =
        serde_json::from_str(history_text.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 0);
    assert!(first["lr"].as_f64().unwrap() > 0.0);

    let result = run(bido()
        .args(["eval", "--split", "all", "--model"])
        .arg(&model)
        .arg("--corpus")
        .arg(&corpus));
    assert_exit(&result, 0, "eval");
    let report: serde_json::Value =
        serde_json::from_slice(&result.stdout).unwrap();
    assert_eq!(report["samples"], 12);

    // A 9-sample corpus yields an empty test split (9/10 = 0).
    let tiny = dir.path().join("tiny");
    assert_exit(
        &run(bido()
            .args(["gen-corpus", "--n", "9", "--seed", "6", "--out"])
            .arg(&tiny)),
        0,
        "gen tiny",
    );
    let result = run(bido()
        .args(["eval", "--split", "test", "--model"])
        .arg(&model)
        .arg("--corpus")
        .arg(&tiny));
    assert_exit(&result, 2, "empty split");

    // Obfuscated evaluation path.
    let result = run(bido()
        .args(["eval", "--split", "all", "--obfuscate", "encrypt:60", "--model"])
        .arg(&model)
        .arg("--corpus")
        .arg(&corpus));
    assert_exit(&result, 0, "obfuscated eval");
}

#[test]
fn inspect_reports_builder_header() {
    let dir = tempfile::tempdir().unwrap();
    let (dex, header) = write_sample_dex(dir.path());
    let result = run(bido().args(["inspect", "--json", "--strict"]).arg(&dex));
    assert_exit(&result, 0, "inspect");
    let v: serde_json::Value = serde_json::from_slice(&result.stdout).unwrap();
    assert_eq!(v["header"]["file_size"], header.file_size);
    assert_eq!(v["header"]["string_ids_size"], header.string_ids_size);
    assert_eq!(v["spans"].as_array().unwrap().len(), 6);
    assert_eq!(v["checksum_verified"], true);

    let not_dex = dir.path().join("not.dex");
    fs::write(&not_dex, b"PK\x03\x04 definitely a zip").unwrap();
    assert_exit(&run(bido().args(["inspect"]).arg(&not_dex)), 2, "non-dex");
}

#[test]
fn config_file_with_unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "epocs = 3\n").unwrap();
    let corpus = dir.path().join("c");
    assert_exit(
        &run(bido()
            .args(["gen-corpus", "--n", "2", "--out"])
            .arg(&corpus)
            .arg("--config")
            .arg(&cfg)),
        2,
        "unknown config key",
    );
}
