mod common;

use std::fs;
use std::path::{Path, PathBuf};

use dynprompt_core::corpus::{dataset_stats, extract_spans, load_conll, load_dataset, Scheme};
use dynprompt_core::exec::Execution;
use dynprompt_core::runner::{
    collect_reports, read_records, render_csv, render_markdown, report, run_experiment, table_rows, CellStatus,
    ExperimentManifest, ReportFormat, RunOptions,
};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn manifest(name: &str, out: &Path) -> ExperimentManifest {
    let mut m = ExperimentManifest::load(&fixtures().join("manifests").join(name)).unwrap();
    m.output_dir = out.to_path_buf();
    m
}

/// A small grid: static 5-shot plus dynamic tf-idf 5-shot, two seeds.
fn small(name: &str, out: &Path) -> ExperimentManifest {
    let mut m = manifest(name, out);
    m.set("grid.engines", r#"["tfidf"]"#).unwrap();
    m.set("grid.shots", "[5]").unwrap();
    m.set("grid.seeds", "[1, 2]").unwrap();
    m
}

#[test]
fn sample_corpus_statistics() {
    let d = load_conll(&fixtures().join("data/reddit_toy/sample30.tsv"), Scheme::Bio).unwrap();
    let s = dataset_stats(&d);
    assert_eq!(s.train_sentences + s.test_sentences, 30);
    assert_eq!(s.train_tokens + s.test_tokens, 275);
    assert_eq!(s.entities, 37);
    assert_eq!(s.entity_types, 2);
    assert_eq!(s.label_repairs, 0);
    let brute: usize = d.sentences().map(|s| extract_spans(&s.labels).len()).sum();
    assert_eq!(s.entities, brute);
}

#[test]
fn toy_dataset_statistics_match_brute_force() {
    let d = load_dataset(&fixtures().join("data/reddit_toy/dataset.json")).unwrap();
    let s = dataset_stats(&d);
    assert_eq!(s.test_sentences, 50);
    let brute: usize = d.sentences().map(|s| extract_spans(&s.labels).len()).sum();
    assert_eq!(s.entities, brute);
}

#[test]
fn gold_echo_grid_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_experiment(&manifest("toy_gold_echo.toml", dir.path()), &RunOptions::default()).unwrap();
    assert_eq!(s.reports.len(), 15);
    assert_eq!(s.exit_code(), 0);
    for c in &s.reports {
        assert_eq!(c.aggregate.as_ref().unwrap().f1, 1.0, "{}", c.method);
        assert!(c.runs.iter().all(|r| r.repairs == 0 && r.failed == 0));
    }
}

#[test]
fn every_test_sentence_once_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_experiment(&small("toy_corrupt.toml", dir.path()), &RunOptions::default()).unwrap();
    let d = load_dataset(&fixtures().join("data/reddit_toy/dataset.json")).unwrap();
    let want: Vec<&str> = d.test.iter().map(|t| t.id.as_str()).collect();
    for r in &s.runs {
        let path = s.experiment_dir.join(&r.cell).join(format!("run-{}.jsonl", r.seed));
        let mut ids: Vec<String> = read_records(&path)
            .unwrap()
            .into_iter()
            .map(|r| r.sentence_id)
            .collect();
        ids.sort();
        let mut sorted = want.clone();
        sorted.sort();
        assert_eq!(ids, sorted, "{}", path.display());
    }
}

#[test]
fn same_manifest_twice_gives_identical_records() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let opts = RunOptions {
        no_cache: true,
        ..RunOptions::default()
    };
    let sa = run_experiment(&small("toy_corrupt.toml", a.path()), &opts).unwrap();
    let sb = run_experiment(&small("toy_corrupt.toml", b.path()), &opts).unwrap();
    assert_eq!(sa.manifest_hash, sb.manifest_hash);
    for r in &sa.runs {
        let rel = Path::new(&r.cell).join(format!("run-{}.jsonl", r.seed));
        let x = fs::read(sa.experiment_dir.join(&rel)).unwrap();
        let y = fs::read(sb.experiment_dir.join(&rel)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{}", rel.display());
    }
}

#[test]
fn warm_cache_issues_no_requests() {
    let (a, b, cache) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let cache_dir = cache.path().to_str().unwrap();
    let mut cold = small("toy_gold_echo.toml", a.path());
    cold.set("llm.cache_dir", cache_dir).unwrap();
    let first = run_experiment(&cold, &RunOptions::default()).unwrap();
    assert!(first.requests_sent() > 0);

    let mut warm = small("toy_gold_echo.toml", b.path());
    warm.set("llm.cache_dir", cache_dir).unwrap();
    let second = run_experiment(&warm, &RunOptions::default()).unwrap();
    assert_eq!(second.requests_sent(), 0);
    assert_eq!(first.reports, second.reports);

    let bypass = run_experiment(
        &warm,
        &RunOptions {
            no_cache: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    // Records already on disk are skipped, so nothing is re-requested either way.
    assert_eq!(bypass.requests_sent(), 0);
}

#[test]
fn failed_completions_are_recorded_and_exit_code_is_three() {
    let server = common::serve(vec![(500, "down".into())]);
    let dir = tempfile::tempdir().unwrap();
    let mut m = manifest("toy_gold_echo.toml", dir.path());
    m.set("grid.modes", r#"["static"]"#).unwrap();
    m.set("grid.shots", "[5]").unwrap();
    m.set("grid.seeds", "[1]").unwrap();
    m.set(
        "llm.backend",
        &format!(r#"{{"kind": "http", "endpoint": "{}"}}"#, server.url),
    )
    .unwrap();
    m.set(
        "llm.retry",
        r#"{"max_attempts": 2, "base_delay_ms": 1, "factor": 1.0, "max_delay_ms": 1}"#,
    )
    .unwrap();
    m.set("llm.cache", "false").unwrap();
    let s = run_experiment(&m, &RunOptions::default()).unwrap();
    assert_eq!(s.failed_sentences(), 50);
    assert_eq!(s.exit_code(), 3);
    assert_eq!(s.requests_sent(), 100);
    let cell = &s.reports[0];
    assert_eq!(cell.status, CellStatus::Complete);
    assert_eq!(cell.aggregate.as_ref().unwrap().recall, 0.0);
}

#[test]
fn invalid_manifest_fails_before_any_request() {
    let server = common::serve(vec![(200, common::chat_body("[]"))]);
    let dir = tempfile::tempdir().unwrap();
    let mut m = manifest("toy_gold_echo.toml", dir.path());
    m.set(
        "llm.backend",
        &format!(r#"{{"kind": "http", "endpoint": "{}"}}"#, server.url),
    )
    .unwrap();
    m.set("grid.runs", "3").unwrap();
    let err = run_experiment(&m, &RunOptions::default()).unwrap_err();
    assert!(err.is_config(), "{err}");
    assert!(server.seen.lock().unwrap().is_empty());
}

#[test]
fn report_tables_have_the_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = manifest("toy_gold_echo.toml", dir.path());
    m.set("grid.modes", r#"["static"]"#).unwrap();
    m.set("grid.shots", "[5]").unwrap();
    m.set("grid.seeds", "[1]").unwrap();
    run_experiment(&m, &RunOptions::default()).unwrap();

    let csv = report(dir.path(), &ReportFormat::Csv).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    let numeric: Vec<f64> = rows[0].iter().skip(5).map(|v| v.parse().unwrap()).collect();
    assert_eq!(numeric.len(), 9);
    assert_eq!(header.len(), 14);
    assert_eq!(&numeric[..3], &[100.0, 100.0, 100.0]);
}

#[test]
fn avg_row_is_the_mean_of_run_rows_and_markdown_is_rectangular() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&small("toy_corrupt.toml", dir.path()), &RunOptions::default()).unwrap();
    let cells = collect_reports(dir.path(), Execution::default()).unwrap();
    let rows = table_rows(&cells);
    for cell in &cells {
        let mine: Vec<_> = rows
            .iter()
            .filter(|r| r.method == cell.method && r.shots == cell.shots)
            .collect();
        let (avg, runs) = mine.split_last().unwrap();
        assert_eq!(avg.run, "AVG");
        assert_eq!(runs.len(), cell.runs.len());
        let avg = avg.values.unwrap();
        for (k, want) in avg.iter().take(3).enumerate() {
            let mean = runs.iter().map(|r| r.values.unwrap()[k]).sum::<f64>() / runs.len() as f64;
            assert!((mean - want).abs() < 1e-9);
        }
    }

    let md = render_markdown(&cells);
    let widths: Vec<usize> = md
        .lines()
        .filter(|l| l.starts_with('|'))
        .map(|l| l.matches('|').count())
        .collect();
    assert!(widths.len() > 2);
    assert!(widths.iter().all(|w| *w == widths[0]), "{widths:?}");
    assert!(render_csv(&cells).unwrap().lines().count() == rows.len() + 1);
}

#[test]
fn partial_grid_renders_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        record_limit: Some(60),
        ..RunOptions::default()
    };
    let s = run_experiment(&small("toy_gold_echo.toml", dir.path()), &opts).unwrap();
    assert!(s.interrupted);
    let md = report(dir.path(), &ReportFormat::Markdown).unwrap();
    assert!(md.contains("(partial)") || md.contains("(missing)"), "{md}");
    let widths: Vec<usize> = md
        .lines()
        .filter(|l| l.starts_with('|'))
        .map(|l| l.matches('|').count())
        .collect();
    assert!(widths.iter().all(|w| *w == widths[0]));
}

#[test]
fn empty_output_dir_is_a_report_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(report(dir.path(), &ReportFormat::Json).is_err());
}
