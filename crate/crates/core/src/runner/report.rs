use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::records::{read_records, RecordStatus};
use super::{CellPlan, ExperimentInfo, RunError, EXPERIMENT_FILE};
use crate::eval::{aggregate_runs, report_with_ci, AggregateReport, ConfidenceIntervals, Counts, MetricReport};
use crate::exec::Execution;
use crate::parse::Repair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Complete,
    Partial,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub sentences: usize,
    pub failed: usize,
    pub repairs: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub experiment: String,
    pub dataset: String,
    pub method: String,
    pub shots: usize,
    pub status: CellStatus,
    pub collapsed: bool,
    /// Completed runs only.
    pub runs: Vec<RunMetrics>,
    /// Present when every planned run is complete.
    pub aggregate: Option<AggregateReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(format!("unknown report format {s:?} (expected json, csv or markdown)")),
        }
    }
}

pub(super) fn run_file(experiment_dir: &Path, cell: &CellPlan, seed: u64) -> PathBuf {
    experiment_dir.join(cell.cell.id()).join(format!("run-{seed}.jsonl"))
}

fn cell_report(
    experiment_dir: &Path,
    info: &ExperimentInfo,
    plan: &CellPlan,
    exec: Execution,
) -> Result<CellReport, RunError> {
    let position: HashMap<&str, usize> = info
        .test_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut runs = Vec::new();
    let mut any_records = false;
    for &seed in &plan.seeds {
        let records = read_records(&run_file(experiment_dir, plan, seed))?;
        any_records |= !records.is_empty();
        let mut counts: Vec<Option<Counts>> = vec![None; info.test_ids.len()];
        let (mut failed, mut repairs) = (0, 0);
        for r in &records {
            let Some(&i) = position.get(r.sentence_id.as_str()) else {
                return Err(RunError::Records(format!(
                    "unknown sentence {} in run {seed}",
                    r.sentence_id
                )));
            };
            counts[i] = Some(r.counts);
            failed += usize::from(r.status == RecordStatus::Failed);
            repairs += usize::from(r.repair != Repair::None && r.status == RecordStatus::Ok);
        }
        let Some(counts) = counts.into_iter().collect::<Option<Vec<Counts>>>() else {
            continue;
        };
        let ev = &info.eval;
        runs.push(RunMetrics {
            seed,
            sentences: counts.len(),
            failed,
            repairs,
            report: report_with_ci(&counts, ev.n_boot, ev.seed, ev.level, exec)?,
        });
    }
    let status = if runs.len() == plan.seeds.len() {
        CellStatus::Complete
    } else if any_records {
        CellStatus::Partial
    } else {
        CellStatus::Missing
    };
    let aggregate = match status {
        CellStatus::Complete => Some(aggregate_runs(
            &runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>(),
        )?),
        _ => None,
    };
    Ok(CellReport {
        experiment: info.manifest_hash.clone(),
        dataset: info.dataset.clone(),
        method: plan.cell.method(),
        shots: plan.cell.shots,
        status,
        collapsed: plan.collapsed,
        runs,
        aggregate,
    })
}

/// Scores every planned cell of one experiment from its run files.
pub fn experiment_report(experiment_dir: &Path, exec: Execution) -> Result<Vec<CellReport>, RunError> {
    let path = experiment_dir.join(EXPERIMENT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| RunError::io(&path, e))?;
    let info: ExperimentInfo =
        serde_json::from_str(&text).map_err(|e| RunError::Records(format!("{}: {e}", path.display())))?;
    info.cells
        .iter()
        .map(|c| cell_report(experiment_dir, &info, c, exec))
        .collect()
}

/// Scores every experiment under `output_dir/runs`, ordered by experiment hash.
pub fn collect_reports(output_dir: &Path, exec: Execution) -> Result<Vec<CellReport>, RunError> {
    let runs = output_dir.join("runs");
    let mut dirs: Vec<PathBuf> = match fs::read_dir(&runs) {
        Ok(rd) => rd
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.join(EXPERIMENT_FILE).is_file())
            .collect(),
        Err(_) => Vec::new(),
    };
    if dirs.is_empty() {
        return Err(RunError::Report(format!(
            "no experiment results under {}",
            output_dir.display()
        )));
    }
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        out.extend(experiment_report(&d, exec)?);
    }
    Ok(out)
}

/// One table row: identifying columns plus nine metric columns in percent
/// (P, R, F1, then lower/upper for each), or a gap.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub shots: usize,
    pub run: String,
    pub status: CellStatus,
    pub values: Option<[f64; 9]>,
}

fn metric_values(p: f64, r: f64, f1: f64, ci: Option<&ConfidenceIntervals>) -> [f64; 9] {
    let pct = |x: f64| x * 100.0;
    let (pl, ph, rl, rh, fl, fh) = match ci {
        Some(c) => (
            c.precision.lower,
            c.precision.upper,
            c.recall.lower,
            c.recall.upper,
            c.f1.lower,
            c.f1.upper,
        ),
        None => (p, p, r, r, f1, f1),
    };
    [p, r, f1, pl, ph, rl, rh, fl, fh].map(pct)
}

/// Table rows: per-run rows when a cell has several runs, then its `AVG`
/// row. Incomplete cells get a single gap row.
pub fn table_rows(cells: &[CellReport]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for c in cells {
        let row = |run: String, values| ReportRow {
            dataset: c.dataset.clone(),
            method: c.method.clone(),
            shots: c.shots,
            run,
            status: c.status,
            values,
        };
        match &c.aggregate {
            Some(agg) => {
                if c.runs.len() > 1 {
                    for r in &c.runs {
                        let m = &r.report;
                        rows.push(row(
                            format!("seed {}", r.seed),
                            Some(metric_values(m.precision, m.recall, m.f1, m.ci.as_ref())),
                        ));
                    }
                }
                rows.push(row(
                    "AVG".into(),
                    Some(metric_values(agg.precision, agg.recall, agg.f1, agg.ci.as_ref())),
                ));
            }
            None => rows.push(row("AVG".into(), None)),
        }
    }
    rows
}

pub const METRIC_COLUMNS: [&str; 9] = [
    "p", "r", "f1", "p_low", "p_high", "r_low", "r_high", "f1_low", "f1_high",
];

fn status_str(s: CellStatus) -> &'static str {
    match s {
        CellStatus::Complete => "complete",
        CellStatus::Partial => "partial",
        CellStatus::Missing => "missing",
    }
}

pub fn render_csv(cells: &[CellReport]) -> Result<String, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset", "method", "shots", "run", "status"];
    header.extend(METRIC_COLUMNS);
    let csv_err = |e: csv::Error| RunError::Report(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in table_rows(cells) {
        let mut rec = vec![
            r.dataset,
            r.method,
            r.shots.to_string(),
            r.run,
            status_str(r.status).to_string(),
        ];
        match r.values {
            Some(v) => rec.extend(v.iter().map(|x| format!("{x:.4}"))),
            None => rec.extend(std::iter::repeat_n(String::new(), 9)),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| RunError::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| RunError::Report(e.to_string()))
}

pub fn render_markdown(cells: &[CellReport]) -> String {
    let mut out = String::new();
    let header = [
        "Dataset", "Method", "Shots", "Run", "P", "R", "F1", "P low", "P high", "R low", "R high", "F1 low", "F1 high",
    ];
    let line = |cols: &[String]| format!("| {} |\n", cols.join(" | "));
    out.push_str(&line(&header.map(String::from)));
    out.push_str(&line(&header.map(|_| "---".to_string())));
    for r in table_rows(cells) {
        let mut cols = vec![r.dataset, r.method, r.shots.to_string(), r.run];
        match r.values {
            Some(v) => cols.extend(v.iter().map(|x| format!("{x:.2}"))),
            None => cols.extend(std::iter::repeat_n(format!("({})", status_str(r.status)), 9)),
        }
        out.push_str(&line(&cols));
    }
    let collapsed: Vec<String> = cells
        .iter()
        .filter(|c| c.collapsed)
        .map(|c| format!("{} {} {}-shot", c.dataset, c.method, c.shots))
        .collect();
    if !collapsed.is_empty() {
        let _ = write!(
            out,
            "\nRuns collapsed to one (output does not depend on the run seed): {}.\n",
            collapsed.join(", ")
        );
    }
    out
}

pub fn render_json(cells: &[CellReport]) -> Result<String, RunError> {
    serde_json::to_string_pretty(cells)
        .map(|s| s + "\n")
        .map_err(|e| RunError::Report(e.to_string()))
}

pub fn render(cells: &[CellReport], format: &ReportFormat) -> Result<String, RunError> {
    match format {
        ReportFormat::Json => render_json(cells),
        ReportFormat::Csv => render_csv(cells),
        ReportFormat::Markdown => Ok(render_markdown(cells)),
    }
}

/// Renders all results under `output_dir`.
pub fn report(output_dir: &Path, format: &ReportFormat) -> Result<String, RunError> {
    render(&collect_reports(output_dir, Execution::default())?, format)
}

/// Writes `report.json`, `report.csv` and `report.md` into `dir`.
pub fn write_reports(dir: &Path, cells: &[CellReport]) -> Result<(), RunError> {
    for (name, body) in [
        ("report.json", render_json(cells)?),
        ("report.csv", render_csv(cells)?),
        ("report.md", render_markdown(cells)),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| RunError::io(&path, e))?;
    }
    Ok(())
}
