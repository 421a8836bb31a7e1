use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn dynprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynprompt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn manifest() -> String {
    fixtures().join("manifests/toy_gold_echo.toml").display().to_string()
}

#[test]
fn stats_prints_json() {
    let o = dynprompt(&[
        "stats",
        fixtures().join("data/reddit_toy/sample30.tsv").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["train_tokens"], 275);
    assert_eq!(v["entities"], 37);
}

#[test]
fn dry_run_prints_the_first_prompt_without_running() {
    let out = tempfile::tempdir().unwrap();
    let o = dynprompt(&[
        "run",
        &manifest(),
        "--dry-run",
        "--output-dir",
        out.path().to_str().unwrap(),
        "--modes",
        "dynamic",
        "--engines",
        "tfidf",
        "--shots",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("dynamic-tfidf-5shot"));
    assert!(text.contains("[Task Description]:"));
    assert!(text.contains("[Query]:"));
    assert!(!out.path().join("runs").exists());
}

#[test]
fn run_then_report() {
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_str().unwrap();
    let o = dynprompt(&[
        "run",
        &manifest(),
        "--output-dir",
        dir,
        "--modes",
        "static",
        "--shots",
        "5",
        "--seeds",
        "1,2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("| AVG |"));

    let o = dynprompt(&["report", dir, "--format", "csv"]);
    assert!(o.status.success());
    let csv = stdout(&o);
    assert_eq!(csv.lines().count(), 4, "{csv}");
    assert!(csv.lines().next().unwrap().ends_with("f1_low,f1_high"));
}

#[test]
fn config_errors_exit_with_two() {
    let out = tempfile::tempdir().unwrap();
    let o = dynprompt(&[
        "run",
        &manifest(),
        "--output-dir",
        out.path().to_str().unwrap(),
        "--set",
        "grid.runs=7",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = dynprompt(&["run", "/no/such/manifest.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dynprompt(&["run", &manifest(), "--set", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failed_sentences_exit_with_three() {
    let out = tempfile::tempdir().unwrap();
    let o = dynprompt(&[
        "run",
        &manifest(),
        "--output-dir",
        out.path().to_str().unwrap(),
        "--modes",
        "static",
        "--shots",
        "5",
        "--seeds",
        "1",
        "--no-cache",
        "--set",
        r#"llm.backend={"kind": "http", "endpoint": "http://127.0.0.1:9/v1/chat/completions"}"#,
        "--set",
        r#"llm.retry={"max_attempts": 1, "base_delay_ms": 1, "factor": 1.0, "max_delay_ms": 1}"#,
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ingest_writes_a_loadable_dataset() {
    let out = tempfile::tempdir().unwrap();
    let data = fixtures().join("data/reddit_toy");
    let o = dynprompt(&[
        "ingest",
        "--train",
        data.join("train.tsv").to_str().unwrap(),
        "--test",
        data.join("test.tsv").to_str().unwrap(),
        "--name",
        "copy",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sidecar = out.path().join("dataset.json");
    let o = dynprompt(&["stats", sidecar.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["name"], "copy");
    assert_eq!(v["test_sentences"], 50);
}

#[test]
fn index_answers_queries() {
    let out = tempfile::tempdir().unwrap();
    let snap = out.path().join("idx.json");
    let o = dynprompt(&[
        "index",
        "--dataset",
        fixtures().join("data/reddit_toy/dataset.json").to_str().unwrap(),
        "--engine",
        "late_interaction",
        "--out",
        snap.to_str().unwrap(),
        "--query",
        "withdrawal was brutal",
        "-k",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(snap.is_file());
    let hits: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(hits.as_array().unwrap().len(), 3);
    assert_eq!(hits[0]["rank"], 1);
}
