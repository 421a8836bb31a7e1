use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dynprompt_core::corpus::{
    dataset_stats, frequency_lexicon, load_conll, load_dataset, load_split_files, tokens_from, write_conll, Dataset,
    DatasetManifest, Scheme,
};
use dynprompt_core::exec::Execution;
use dynprompt_core::retrieval::{EmbeddingProvider, EngineKind, FallbackEmbedder, HttpEmbedder, Index};
use dynprompt_core::runner::{first_prompt, report, run_experiment, ExperimentManifest, ReportFormat, RunOptions};

#[derive(Parser)]
#[command(name = "dynprompt", version, about = "Few-shot NER prompting experiments")]
struct Cli {
    /// Run every data-parallel loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a two-column corpus and write it as a canonical dataset.
    Ingest(IngestArgs),
    /// Build a retrieval index over a dataset's training split.
    Index(IndexArgs),
    /// Run an experiment grid from a manifest.
    Run(RunArgs),
    /// Render reports for every experiment under an output directory.
    Report(ReportArgs),
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Bio,
    Plain,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Bio => Scheme::Bio,
            SchemeArg::Plain => Scheme::Plain,
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum, default_value = "bio")]
    scheme: SchemeArg,
    #[arg(long)]
    name: String,
    /// Directory receiving train.tsv, test.tsv and dataset.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    /// Dataset sidecar (dataset.json).
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "tfidf")]
    engine: EngineKind,
    /// Where to save the index snapshot.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Embedding service base URL; the hashing fallback is used otherwise.
    #[arg(long)]
    embedder_url: Option<String>,
    #[arg(long, default_value = "default")]
    embedder_model: String,
    /// Whitespace-separated query to retrieve for.
    #[arg(long)]
    query: Option<String>,
    #[arg(short, long, default_value_t = 5)]
    k: usize,
}

#[derive(Args)]
struct RunArgs {
    manifest: PathBuf,
    /// Override a manifest field, e.g. `--set grid.shots=[5]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    shots: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    engines: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    no_cache: bool,
    /// Stop after this many new records (the run can be resumed later).
    #[arg(long)]
    limit: Option<usize>,
    /// Print the first prompt of the grid and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Markdown,
}

#[derive(Args)]
struct ReportArgs {
    output_dir: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
}

#[derive(Args)]
struct StatsArgs {
    /// dataset.json sidecar or a single two-column file.
    path: PathBuf,
    #[arg(long, value_enum, default_value = "bio")]
    scheme: SchemeArg,
    /// Also print the top-k words per entity type.
    #[arg(long)]
    lexicon: Option<usize>,
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

fn config(message: impl ToString) -> Failure {
    Failure {
        code: 2,
        message: message.to_string(),
    }
}

fn other(message: impl ToString) -> Failure {
    Failure {
        code: 1,
        message: message.to_string(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Index(a) => index(a, exec),
        Command::Run(a) => run(a, exec),
        Command::Report(a) => render_report(a),
        Command::Stats(a) => stats(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(v).map_err(other)?);
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<u8, Failure> {
    let d = load_split_files(&a.name, &a.train, &a.test, a.scheme.into(), None).map_err(config)?;
    fs::create_dir_all(&a.out).map_err(other)?;
    for (file, split) in [("train.tsv", &d.train), ("test.tsv", &d.test)] {
        let f = fs::File::create(a.out.join(file)).map_err(other)?;
        write_conll(split, std::io::BufWriter::new(f)).map_err(other)?;
    }
    let manifest = DatasetManifest {
        name: d.name.clone(),
        scheme: Scheme::Bio,
        train: "train.tsv".into(),
        test: "test.tsv".into(),
        entity_types: Some(d.entity_types.clone()),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(other)?;
    fs::write(a.out.join("dataset.json"), text + "\n").map_err(other)?;
    print_json(&dataset_stats(&d))?;
    Ok(0)
}

fn embedder(url: Option<String>, model: String) -> Result<Box<dyn EmbeddingProvider>, Failure> {
    Ok(match url {
        Some(u) => Box::new(HttpEmbedder::new(u, model).map_err(config)?),
        None => Box::new(FallbackEmbedder),
    })
}

fn index(a: IndexArgs, exec: Execution) -> Result<u8, Failure> {
    let d = load_dataset(&a.dataset).map_err(config)?;
    let emb = embedder(a.embedder_url, a.embedder_model)?;
    let idx = Index::build(&d.train, a.engine, Some(emb.as_ref()), exec).map_err(other)?;
    eprintln!("{} index: {} sentences, dim {}", a.engine, idx.len(), idx.dim());
    if let Some(out) = &a.out {
        idx.save(out).map_err(other)?;
    }
    if let Some(q) = a.query {
        let words: Vec<&str> = q.split_whitespace().collect();
        let hits = idx
            .retrieve_tokens(&tokens_from(&words), a.k, Some(emb.as_ref()), exec)
            .map_err(other)?;
        print_json(&hits)?;
    }
    Ok(0)
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|c| c.join(p))
            .unwrap_or_else(|_| p.to_path_buf())
    }
}

fn json_list<T: serde::Serialize>(items: &[T]) -> String {
    serde_json::to_string(items).expect("plain values serialize")
}

fn apply_overrides(m: &mut ExperimentManifest, a: &RunArgs) -> Result<(), Failure> {
    let mut sets: Vec<(String, String)> = Vec::new();
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        sets.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = &a.shots {
        sets.push(("grid.shots".into(), json_list(s)));
    }
    if let Some(s) = &a.modes {
        sets.push(("grid.modes".into(), json_list(s)));
    }
    if let Some(s) = &a.engines {
        sets.push(("grid.engines".into(), json_list(s)));
    }
    if let Some(s) = &a.seeds {
        sets.push(("grid.seeds".into(), json_list(s)));
        sets.push(("grid.runs".into(), s.len().to_string()));
    }
    for (k, v) in sets {
        m.set(&k, &v).map_err(config)?;
    }
    if let Some(out) = &a.output_dir {
        m.output_dir = absolute(out);
    }
    Ok(())
}

fn run(a: RunArgs, exec: Execution) -> Result<u8, Failure> {
    let mut m = ExperimentManifest::load(&a.manifest).map_err(config)?;
    apply_overrides(&mut m, &a)?;
    if a.dry_run {
        let (cell, bundle) = first_prompt(&m).map_err(|e| if e.is_config() { config(e) } else { other(e) })?;
        println!("# cell {cell}, prompt {}\n", bundle.digest());
        println!("--- system ---\n{}\n", bundle.system_message);
        println!("--- user ---\n{}", bundle.user_message);
        return Ok(0);
    }
    let opts = RunOptions {
        exec,
        record_limit: a.limit,
        no_cache: a.no_cache,
    };
    let s = run_experiment(&m, &opts).map_err(|e| if e.is_config() { config(e) } else { other(e) })?;
    for r in &s.runs {
        eprintln!(
            "{} seed {}: {} written, {} resumed, {} failed",
            r.cell, r.seed, r.written, r.skipped, r.failed
        );
    }
    if !s.collapsed_cells.is_empty() {
        eprintln!("collapsed to one run: {}", s.collapsed_cells.join(", "));
    }
    if s.interrupted {
        eprintln!("stopped at the record limit; rerun to resume");
    }
    eprintln!("results in {}", s.experiment_dir.display());
    println!(
        "{}",
        fs::read_to_string(s.experiment_dir.join("report.md")).map_err(other)?
    );
    let failed = s.failed_sentences();
    if failed > 0 {
        eprintln!("{failed} sentences failed after retries");
    }
    Ok(s.exit_code() as u8)
}

fn render_report(a: ReportArgs) -> Result<u8, Failure> {
    let format = match a.format {
        FormatArg::Json => ReportFormat::Json,
        FormatArg::Csv => ReportFormat::Csv,
        FormatArg::Markdown => ReportFormat::Markdown,
    };
    print!("{}", report(&a.output_dir, &format).map_err(other)?);
    Ok(0)
}

fn load_any(path: &Path, scheme: Scheme) -> Result<Dataset, Failure> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        load_dataset(path)
    } else {
        load_conll(path, scheme)
    }
    .map_err(config)
}

fn stats(a: StatsArgs) -> Result<u8, Failure> {
    let d = load_any(&a.path, a.scheme.into())?;
    print_json(&dataset_stats(&d))?;
    if let Some(k) = a.lexicon {
        println!("{}", frequency_lexicon(&d, k).render());
    }
    Ok(0)
}
