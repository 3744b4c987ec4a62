use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use srcl_cli::commands::{EXIT_ASSERTION, EXIT_CONFIG, EXIT_OK};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("srcl-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn srcl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srcl"))
        .args(args)
        .env("SRCL_OUTPUT_DIR", dir)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_config_key_is_a_config_error_with_line() {
    let dir = scratch("unknown-key");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "[world]\nbogus = 3\n").unwrap();
    let out = srcl(&dir, &["train", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_CONFIG);
    let err = stderr(&out);
    assert!(err.contains("line 2"), "{err}");
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn malformed_config_is_rejected() {
    let dir = scratch("malformed");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "[train\nsteps = 3\n").unwrap();
    let out = srcl(&dir, &["gradcheck", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_CONFIG);
}

#[test]
fn invalid_value_is_rejected_before_running() {
    let dir = scratch("invalid-value");
    let out = srcl(&dir, &["train", "--set", "train.momentum=1.5"]);
    assert_eq!(code(&out), EXIT_CONFIG);
    assert!(!dir.join("teacher.ckpt").exists());
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let dir = scratch("missing-ckpt");
    let out = srcl(&dir, &["eval", "--checkpoint", dir.join("nope.ckpt").to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_CONFIG);
}

#[test]
fn corrupted_gradient_fails_the_audit() {
    let dir = scratch("corrupt");
    let args = ["gradcheck", "--set", "verify.gradcheck_instances=4"];
    let ok = srcl(&dir, &args);
    assert_eq!(code(&ok), EXIT_OK, "{}", stderr(&ok));
    let bad = srcl(&dir, &[&args[..], &["--corrupt-gradient"]].concat());
    assert_eq!(code(&bad), EXIT_ASSERTION);
}

#[test]
fn verify_bounds_reports_every_cell() {
    let dir = scratch("verify");
    let out = srcl(
        &dir,
        &[
            "verify-bounds",
            "--set", "verify.n_batches=2000",
            "--set", "verify.jensen_samples=2000",
            "--set", "verify.controllability_samples=500",
        ],
    );
    assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.join("verify_bounds.jsonl")).unwrap();
    let records: Vec<serde_json::Value> =
        text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records[0]["record"], "provenance");
    assert_eq!(records.last().unwrap()["record"], "summary");
    assert_eq!(records.last().unwrap()["passed"], true);
    for kind in ["mi_bound", "dependent_bound", "jensen", "controllability"] {
        assert!(records.iter().any(|r| r["record"] == kind), "no {kind} records");
    }
    // stdout mirrors the report file
    assert_eq!(String::from_utf8_lossy(&out.stdout), text);
}

#[test]
fn train_then_eval_round_trip() {
    let dir = scratch("train-eval");
    let quick = ["--set", "train.steps=50", "--set", "eval.histogram_batches=5"];
    let out = srcl(&dir, &[&["train"][..], &quick].concat());
    assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
    for f in ["teacher.ckpt", "student.ckpt", "history.csv", "train.jsonl"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let history = std::fs::read_to_string(dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 51);

    let ckpt = dir.join("student.ckpt");
    let out = srcl(&dir, &[&["eval", "--checkpoint", ckpt.to_str().unwrap()][..], &quick].concat());
    assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.join("eval.jsonl")).unwrap();
    let retrieval: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert_eq!(retrieval["record"], "retrieval");

    // the checksum eval reports is the one train recorded for the student
    let train = std::fs::read_to_string(dir.join("train.jsonl")).unwrap();
    let student: serde_json::Value = train
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|r| r["role"] == "student")
        .unwrap();
    assert_eq!(student["checksum"], retrieval["checksum"]);
}

#[test]
fn sweep_writes_one_row_per_threshold() {
    let dir = scratch("sweep");
    let out = srcl(
        &dir,
        &["sweep", "--set", "train.steps=30", "--set", "eval.thresholds=[0.0, 0.2, 0.4]"],
    );
    assert_eq!(code(&out), EXIT_OK, "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(dir.join("sweep.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["threshold", "r_at_1_ab", "r_at_1_ba", "skipped_rows"]
    );
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[0][3], "0");
}
