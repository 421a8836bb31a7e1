//! Experiment orchestration: manifest, grid execution, resumable JSONL
//! records and reports.
//!
//! Layout under the output directory:
//!
//! ```text
//! runs/<manifest-hash>/experiment.json
//! runs/<manifest-hash>/<cell>/run-<seed>.jsonl
//! runs/<manifest-hash>/report.{json,csv,md}
//! cache/                      completion cache (shared across manifests)
//! ```

mod manifest;
mod records;
mod report;

pub use manifest::{
    BackendConfig, ComponentToggles, DatasetRef, EmbedderConfig, EvalConfig, ExperimentManifest, GridConfig,
    HighFrequencySource, LlmConfig, Mode, PromptConfig, DEFAULT_RUNS, MANIFEST_VERSION,
};
pub use records::{read_records, RecordStatus, RecordWriter, RunRecord};
pub use report::{
    collect_reports, experiment_report, render, render_csv, render_json, render_markdown, report, table_rows,
    write_reports, CellReport, CellStatus, ReportFormat, ReportRow, RunMetrics, METRIC_COLUMNS,
};

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{frequency_lexicon, CorpusError, Dataset, LabeledSentence};
use crate::eval::{score_sentence, EvalError};
use crate::exec::Execution;
use crate::llm::{CompletionBackend, CompletionCache, HttpBackend, LlmClient, LlmError, MockBehavior, MockLlm};
use crate::parse::{parse_response, to_spans, LabelSet, Repair};
use crate::prompt::{
    build_prompt, sample_static_examples, Component, ExampleBlockConfig, HighFrequency, PromptBundle, PromptComponents,
    PromptError, PromptFixture,
};
use crate::retrieval::{
    EmbedError, EmbeddingProvider, EngineKind, FallbackEmbedder, HttpEmbedder, Index, RetrievalError,
};

pub const EXPERIMENT_FILE: &str = "experiment.json";
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("embedding service: {0}")]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run records: {0}")]
    Records(String),
    #[error("report: {0}")]
    Report(String),
}

impl RunError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Whether the error was caused by the manifest or its inputs rather
    /// than by a failure during execution.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            RunError::Config(_) | RunError::Corpus(_) | RunError::Prompt(_) | RunError::Llm(LlmError::Config(_))
        )
    }
}

/// One point of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: Mode,
    pub engine: Option<EngineKind>,
    pub shots: usize,
}

impl Cell {
    /// Directory name, e.g. `static-5shot` or `dynamic-tfidf-10shot`.
    pub fn id(&self) -> String {
        match self.engine {
            Some(e) => format!("dynamic-{e}-{}shot", self.shots),
            None => format!("static-{}shot", self.shots),
        }
    }

    /// Method column: `static` or the engine name.
    pub fn method(&self) -> String {
        self.engine.map_or_else(|| "static".to_string(), |e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellPlan {
    pub cell: Cell,
    pub seeds: Vec<u64>,
    /// Runs were reduced to one because nothing in the cell depends on the
    /// run seed.
    pub collapsed: bool,
}

/// Written once per experiment; everything a report needs besides the
/// run files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentInfo {
    pub manifest_hash: String,
    pub dataset: String,
    pub test_ids: Vec<String>,
    pub eval: EvalConfig,
    pub cells: Vec<CellPlan>,
    pub manifest: ExperimentManifest,
}

/// Expands the grid. Static cells ignore the engine list. A cell whose
/// output cannot depend on the run seed (dynamic retrieval, or zero-shot
/// static) keeps only the first seed unless the backend is stochastic.
pub fn plan(m: &ExperimentManifest) -> Result<Vec<CellPlan>, RunError> {
    let seeds = m.grid.run_seeds()?;
    let stochastic = m.llm.backend.is_stochastic();
    let mut out = Vec::new();
    for &mode in &m.grid.modes {
        let engines: Vec<Option<EngineKind>> = match mode {
            Mode::Static => vec![None],
            Mode::Dynamic => m.grid.engines.iter().copied().map(Some).collect(),
        };
        for engine in engines {
            for &shots in &m.grid.shots {
                let cell = Cell { mode, engine, shots };
                let seed_free = mode == Mode::Dynamic || shots == 0;
                let collapsed = seed_free && !stochastic && seeds.len() > 1;
                out.push(CellPlan {
                    cell,
                    seeds: if collapsed { seeds[..1].to_vec() } else { seeds.clone() },
                    collapsed,
                });
            }
        }
    }
    Ok(out)
}

/// Corruption seed used for one run: the configured seed mixed with the run
/// seed so that runs differ.
pub fn run_behavior(behavior: &MockBehavior, run_seed: u64) -> MockBehavior {
    match behavior {
        MockBehavior::Corrupt { rate, seed } => MockBehavior::Corrupt {
            rate: *rate,
            seed: seed ^ run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        },
        other => other.clone(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub exec: Execution,
    /// Stop after writing this many new records in total.
    pub record_limit: Option<usize>,
    /// Bypass the completion cache.
    pub no_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub cell: String,
    pub seed: u64,
    pub written: usize,
    pub skipped: usize,
    pub failed: usize,
    /// Backend calls, retries included; cache hits are not counted.
    pub requests: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub manifest_hash: String,
    pub experiment_dir: PathBuf,
    pub runs: Vec<RunOutcome>,
    pub collapsed_cells: Vec<String>,
    /// The record limit was reached before the grid finished.
    pub interrupted: bool,
    pub reports: Vec<CellReport>,
}

impl RunSummary {
    /// Failed sentences across all run files of the experiment.
    pub fn requests_sent(&self) -> usize {
        self.runs.iter().map(|r| r.requests).sum()
    }

    pub fn failed_sentences(&self) -> usize {
        self.reports.iter().flat_map(|c| &c.runs).map(|r| r.failed).sum()
    }

    /// 0 on success, 3 when some sentences failed after retries.
    pub fn exit_code(&self) -> i32 {
        if self.failed_sentences() > 0 {
            3
        } else {
            0
        }
    }
}

/// Inputs shared by every cell of an experiment.
struct Prepared {
    dataset: Dataset,
    components: PromptComponents,
    plans: Vec<CellPlan>,
    embedder: Box<dyn EmbeddingProvider>,
    http: Option<Arc<HttpBackend>>,
    labels: LabelSet,
}

fn make_embedder(cfg: &EmbedderConfig) -> Result<Box<dyn EmbeddingProvider>, RunError> {
    Ok(match cfg {
        EmbedderConfig::Fallback => Box::new(FallbackEmbedder),
        EmbedderConfig::Http { url, model, token_env } => {
            let mut e = HttpEmbedder::new(url.clone(), model.clone())?;
            if let Some(var) = token_env {
                let token = std::env::var(var).map_err(|_| RunError::Config(format!("{var} is not set")))?;
                e = e.with_token(token);
            }
            Box::new(e)
        }
    })
}

fn prepare(m: &ExperimentManifest) -> Result<Prepared, RunError> {
    m.validate()?;
    let dataset = m.load_dataset()?;
    let fixture = PromptFixture::load(&m.resolve(&m.prompt.fixture))?;
    let mut components = PromptComponents::from_fixture(&fixture, ExampleBlockConfig::static_random(0, 0));
    let t = &m.prompt.components;
    components.dataset_description.enabled = t.dataset_description;
    components.umls_knowledge.enabled = t.umls_knowledge;
    components.error_feedback.enabled = t.error_feedback;
    components.high_freq = match m.prompt.high_frequency_source {
        HighFrequencySource::Lexicon => Component {
            enabled: t.high_frequency,
            content: Some(HighFrequency::Lexicon(frequency_lexicon(
                &dataset,
                m.prompt.lexicon_size,
            ))),
        },
        HighFrequencySource::Fixture => Component {
            enabled: t.high_frequency,
            content: fixture.high_frequency.clone().map(HighFrequency::Text),
        },
    };
    if let Some(order) = &m.prompt.order {
        components.order = order.clone();
    }
    components.examples.format = m.prompt.example_format;
    components.examples.sampling = m.prompt.static_sampling;

    let http = match &m.llm.backend {
        BackendConfig::Http(cfg) => Some(Arc::new(HttpBackend::new(cfg.clone().with_env())?)),
        BackendConfig::Mock { .. } => None,
    };
    Ok(Prepared {
        labels: LabelSet::from_types(&dataset.entity_types),
        plans: plan(m)?,
        embedder: make_embedder(&m.embedder)?,
        dataset,
        components,
        http,
    })
}

fn build_indexes(p: &Prepared, exec: Execution) -> Result<BTreeMap<EngineKind, Index>, RunError> {
    let mut out = BTreeMap::new();
    for plan in &p.plans {
        if let Some(kind) = plan.cell.engine {
            if plan.cell.shots > 0 && !out.contains_key(&kind) {
                out.insert(
                    kind,
                    Index::build(&p.dataset.train, kind, Some(p.embedder.as_ref()), exec)?,
                );
            }
        }
    }
    Ok(out)
}

/// Per-run state for producing examples and prompts.
struct RunContext<'a> {
    prepared: &'a Prepared,
    cell: Cell,
    components: PromptComponents,
    static_examples: Vec<LabeledSentence>,
    index: Option<&'a Index>,
    train_by_id: &'a HashMap<&'a str, &'a LabeledSentence>,
}

impl RunContext<'_> {
    fn examples_for(&self, query: &LabeledSentence) -> Result<Vec<LabeledSentence>, RunError> {
        match (self.cell.mode, self.index) {
            (Mode::Dynamic, Some(index)) => {
                let hits = index.retrieve_tokens(
                    &query.tokens,
                    self.cell.shots,
                    Some(self.prepared.embedder.as_ref()),
                    Execution::Sequential,
                )?;
                Ok(hits
                    .iter()
                    .filter_map(|h| self.train_by_id.get(h.sentence_id.as_str()).map(|s| (*s).clone()))
                    .collect())
            }
            _ => Ok(self.static_examples.clone()),
        }
    }

    fn prompt_for(&self, query: &LabeledSentence) -> Result<PromptBundle, RunError> {
        let examples = self.examples_for(query)?;
        Ok(build_prompt(&self.components, &examples, &query.tokens)?)
    }
}

fn run_context<'a>(
    p: &'a Prepared,
    indexes: &'a BTreeMap<EngineKind, Index>,
    train_by_id: &'a HashMap<&'a str, &'a LabeledSentence>,
    cell: Cell,
    seed: u64,
) -> Result<RunContext<'a>, RunError> {
    let mut components = p.components.clone();
    let sampling = components.examples.sampling;
    let format = components.examples.format;
    components.examples = match cell.engine {
        Some(e) => ExampleBlockConfig::dynamic(cell.shots, e),
        None => ExampleBlockConfig::static_random(cell.shots, seed),
    };
    components.examples.sampling = sampling;
    components.examples.format = format;
    let static_examples = if cell.mode == Mode::Static && cell.shots > 0 {
        sample_static_examples(&p.dataset, &components.examples)?
    } else {
        Vec::new()
    };
    Ok(RunContext {
        prepared: p,
        cell,
        components,
        static_examples,
        index: cell.engine.and_then(|e| indexes.get(&e)),
        train_by_id,
    })
}

fn process_sentence(
    ctx: &RunContext<'_>,
    client: &LlmClient,
    mock: Option<&MockLlm>,
    params: &crate::llm::GenerationParams,
    s: &LabeledSentence,
) -> Result<RunRecord, RunError> {
    let bundle = ctx.prompt_for(s)?;
    let digest = bundle.digest();
    if let Some(m) = mock {
        m.register(&digest, &s.tokens, &s.labels);
    }
    let gold = s.spans();
    let record = match client.complete(&bundle, params, s.len()) {
        Ok(done) => {
            let pred = parse_response(&done.raw_text, &s.tokens, &ctx.prepared.labels);
            RunRecord {
                sentence_id: s.id.clone(),
                status: RecordStatus::Ok,
                prompt_digest: digest,
                example_ids: bundle.included_example_ids,
                raw_text: Some(done.raw_text),
                counts: score_sentence(&gold, &to_spans(&pred)),
                labels: pred.labels,
                repair: pred.repair,
                dropped_items: pred.dropped_items,
                filled_items: pred.filled_items,
                error: None,
            }
        }
        Err(e) => {
            log::warn!("sentence {} failed: {e}", s.id);
            RunRecord {
                sentence_id: s.id.clone(),
                status: RecordStatus::Failed,
                prompt_digest: digest,
                example_ids: bundle.included_example_ids,
                raw_text: None,
                labels: vec![crate::corpus::Label::Outside; s.len()],
                repair: Repair::Unparseable,
                dropped_items: 0,
                filled_items: s.len(),
                counts: score_sentence(&gold, &[]),
                error: Some(e.to_string()),
            }
        }
    };
    Ok(record)
}

fn experiment_info(m: &ExperimentManifest, p: &Prepared) -> ExperimentInfo {
    ExperimentInfo {
        manifest_hash: m.hash(),
        dataset: p.dataset.name.clone(),
        test_ids: p.dataset.test.iter().map(|s| s.id.clone()).collect(),
        eval: m.eval.clone(),
        cells: p.plans.clone(),
        manifest: m.clone(),
    }
}

fn write_experiment_info(dir: &Path, info: &ExperimentInfo) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    let mut info = info.clone();
    info.manifest.output_dir = PathBuf::new();
    info.manifest.llm.cache_dir = None;
    let body = serde_json::to_string_pretty(&info).map_err(|e| RunError::Records(e.to_string()))? + "\n";
    let path = dir.join(EXPERIMENT_FILE);
    fs::write(&path, body).map_err(|e| RunError::io(&path, e))
}

/// Runs (or resumes) every cell of the grid, then writes the reports.
/// Configuration problems are reported before any completion request.
pub fn run_experiment(m: &ExperimentManifest, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let p = prepare(m)?;
    let hash = m.hash();
    let dir = m.output_dir().join("runs").join(&hash);
    write_experiment_info(&dir, &experiment_info(m, &p))?;

    let cache = if m.llm.cache && !opts.no_cache {
        Some(CompletionCache::open(m.cache_dir())?)
    } else {
        None
    };
    let indexes = build_indexes(&p, opts.exec)?;
    let train_by_id: HashMap<&str, &LabeledSentence> = p.dataset.train.iter().map(|s| (s.id.as_str(), s)).collect();
    let params = m.llm.params();
    let mut budget = opts.record_limit;
    let mut outcomes = Vec::new();
    let mut interrupted = false;

    'grid: for plan in &p.plans {
        for &seed in &plan.seeds {
            let ctx = run_context(&p, &indexes, &train_by_id, plan.cell, seed)?;
            let (mock, backend): (Option<Arc<MockLlm>>, Arc<dyn CompletionBackend>) = match &m.llm.backend {
                BackendConfig::Mock { behavior } => {
                    let mock = Arc::new(MockLlm::new(run_behavior(behavior, seed), &p.dataset.entity_types));
                    (Some(mock.clone()), mock)
                }
                BackendConfig::Http(_) => (None, p.http.clone().expect("http backend prepared")),
            };
            let mut client = LlmClient::new(backend, m.llm.retry, m.llm.max_in_flight);
            if let Some(c) = &cache {
                client = client.with_cache(c.clone());
            }

            let path = report::run_file(&dir, plan, seed);
            let (mut writer, done) = RecordWriter::open(&path)?;
            let pending: Vec<&LabeledSentence> = p.dataset.test.iter().filter(|s| !done.contains(&s.id)).collect();
            let mut outcome = RunOutcome {
                cell: plan.cell.id(),
                seed,
                written: 0,
                skipped: done.len(),
                failed: 0,
                requests: 0,
            };
            for chunk in pending.chunks(CHUNK) {
                let take = budget.map_or(chunk.len(), |b| b.min(chunk.len()));
                let records = opts.exec.map(&chunk[..take], |s| {
                    process_sentence(&ctx, &client, mock.as_deref(), &params, s)
                });
                let records = records.into_iter().collect::<Result<Vec<_>, _>>()?;
                writer.append(&records)?;
                outcome.written += records.len();
                outcome.failed += records.iter().filter(|r| r.status == RecordStatus::Failed).count();
                outcome.requests = client.requests_sent();
                if let Some(b) = budget.as_mut() {
                    *b -= take;
                    if take < chunk.len() || *b == 0 && outcome.written + outcome.skipped < p.dataset.test.len() {
                        interrupted = true;
                        outcomes.push(outcome);
                        break 'grid;
                    }
                }
            }
            log::info!(
                "{} seed {seed}: {} written, {} already present",
                outcome.cell,
                outcome.written,
                outcome.skipped
            );
            outcomes.push(outcome);
        }
    }

    let reports = experiment_report(&dir, opts.exec)?;
    write_reports(&dir, &reports)?;
    Ok(RunSummary {
        manifest_hash: hash,
        experiment_dir: dir,
        runs: outcomes,
        collapsed_cells: p.plans.iter().filter(|c| c.collapsed).map(|c| c.cell.id()).collect(),
        interrupted,
        reports,
    })
}

/// The prompt the first completion request of the grid would carry.
pub fn first_prompt(m: &ExperimentManifest) -> Result<(String, PromptBundle), RunError> {
    let p = prepare(m)?;
    let plan = p.plans.first().ok_or_else(|| RunError::Config("empty grid".into()))?;
    let seed = plan.seeds[0];
    let indexes = match plan.cell.engine {
        Some(kind) if plan.cell.shots > 0 => BTreeMap::from([(
            kind,
            Index::build(&p.dataset.train, kind, Some(p.embedder.as_ref()), Execution::default())?,
        )]),
        _ => BTreeMap::new(),
    };
    let train_by_id: HashMap<&str, &LabeledSentence> = p.dataset.train.iter().map(|s| (s.id.as_str(), s)).collect();
    let ctx = run_context(&p, &indexes, &train_by_id, plan.cell, seed)?;
    let bundle = ctx.prompt_for(&p.dataset.test[0])?;
    Ok((plan.cell.id(), bundle))
}
