use std::fs;
use std::path::Path;
use std::process::Command;

use ced_harness::corpus::{write_dataset, Format, Split};
use ced_harness::synth::{generate, Spec};

fn ced(args: &[&str], dir: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ced"))
        .args(args)
        .current_dir(dir)
        .env_remove("CED_BACKEND_TOKEN")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn fixture(dir: &Path, backend: &str) -> String {
    let train = generate(&Spec::new("train", Split::Train, 60, 60).seed(1));
    let dev = generate(&Spec::new("dev", Split::Dev, 30, 20).seed(2));
    fs::write(dir.join("train.tsv"), write_dataset(&train, Format::Tsv)).unwrap();
    fs::write(dir.join("dev.jsonl"), write_dataset(&dev, Format::Jsonl)).unwrap();
    let cfg = format!(
        "output_dir = \"runs\"\n[train]\npath = \"train.tsv\"\n[dev]\npath = \"dev.jsonl\"\n[bootstrap]\nresamples = 200\n{backend}"
    );
    fs::write(dir.join("run.toml"), cfg).unwrap();
    "run.toml".into()
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ced(&["frobnicate"], dir.path()).0, 1);
    assert_eq!(ced(&["eval", "--seed-data", "x"], dir.path()).0, 1);
    // no dev dataset configured
    assert_eq!(ced(&["eval"], dir.path()).0, 1);
}

#[test]
fn eval_and_report_succeed_on_mock() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(
        dir.path(),
        "[backend]\nkind = \"scripted-mock\"\necho_gold = true\n",
    );
    let (code, out, err) = ced(
        &["eval", "--config", &cfg, "--seed-bootstrap", "3"],
        dir.path(),
    );
    assert_eq!(code, 0, "{out}{err}");
    assert!(out.contains("mcc 1.0000"), "{out}");
    let (code, _, err) = ced(&["report", "--config", &cfg], dir.path());
    assert_eq!(code, 0, "{err}");
    assert!(dir.path().join("runs/report/results.md").exists());
    let (code, _, err) = ced(&["sft-export", "--config", &cfg], dir.path());
    assert_eq!(code, 0, "{err}");
}

#[test]
fn malformed_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), "[backend]\nkind = \"scripted-mock\"\n");
    fs::write(
        dir.path().join("dev.jsonl"),
        "{\"id\": \"a\", \"source\": \"x\"}\n",
    )
    .unwrap();
    let (code, _, err) = ced(&["ingest", "--config", &cfg], dir.path());
    assert_eq!(code, 2, "{err}");
}

#[test]
fn unreachable_backend_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), "");
    let (code, _, err) = ced(
        &[
            "eval",
            "--config",
            &cfg,
            "--backend-url",
            "http://127.0.0.1:9",
        ],
        dir.path(),
    );
    assert_eq!(code, 3, "{err}");
}

#[test]
fn strict_leak_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), "[backend]\nkind = \"scripted-mock\"\n");
    let dev = fs::read_to_string(dir.path().join("dev.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(dev.lines().next().unwrap()).unwrap();
    let mut train = fs::read_to_string(dir.path().join("train.tsv")).unwrap();
    let extra = if train.starts_with(ced_harness::corpus::TSV_HEADER_WITH_CATEGORY) {
        "\t"
    } else {
        ""
    };
    let (src, tgt) = (
        first["source"].as_str().unwrap(),
        first["target"].as_str().unwrap(),
    );
    train.push_str(&format!("leak\t{src}\t{tgt}\tNOT{extra}\n"));
    fs::write(dir.path().join("train.tsv"), train).unwrap();
    assert_eq!(ced(&["ingest", "--config", &cfg], dir.path()).0, 0);
    let (code, _, err) = ced(&["ingest", "--config", &cfg, "--strict"], dir.path());
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("leak") || err.contains("shared"), "{err}");
}
