use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::RunError;
use crate::corpus::{load_dataset, load_split_files, Dataset, Scheme, DEFAULT_LEXICON_SIZE};
use crate::llm::{GenerationParams, HttpConfig, MockBehavior, Preset, RetryPolicy};
use crate::prompt::{ComponentKind, ExampleFormat, Sampling};
use crate::retrieval::EngineKind;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Static,
    Dynamic,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(Mode::Static),
            "dynamic" => Ok(Mode::Dynamic),
            _ => Err(format!("unknown mode {s:?} (expected static or dynamic)")),
        }
    }
}

/// Either a dataset sidecar manifest or explicit split files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub manifest: Option<PathBuf>,
    pub name: Option<String>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub scheme: Scheme,
    pub entity_types: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighFrequencySource {
    /// Computed from the training split.
    #[default]
    Lexicon,
    /// The fixture's `high_frequency` section.
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentToggles {
    #[serde(default)]
    pub dataset_description: bool,
    #[serde(default)]
    pub high_frequency: bool,
    #[serde(default)]
    pub umls_knowledge: bool,
    #[serde(default)]
    pub error_feedback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub fixture: PathBuf,
    #[serde(default)]
    pub components: ComponentToggles,
    #[serde(default)]
    pub high_frequency_source: HighFrequencySource,
    #[serde(default = "default_lexicon_size")]
    pub lexicon_size: usize,
    #[serde(default)]
    pub example_format: ExampleFormat,
    #[serde(default = "default_sampling")]
    pub static_sampling: Sampling,
    pub order: Option<Vec<ComponentKind>>,
}

fn default_lexicon_size() -> usize {
    DEFAULT_LEXICON_SIZE
}

fn default_sampling() -> Sampling {
    Sampling::PerLabel
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "default_engines")]
    pub engines: Vec<EngineKind>,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    /// Defaults to the number of seeds, or 4.
    pub runs: Option<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            modes: default_modes(),
            engines: default_engines(),
            shots: default_shots(),
            runs: None,
            seeds: Vec::new(),
        }
    }
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::Static, Mode::Dynamic]
}

fn default_engines() -> Vec<EngineKind> {
    EngineKind::ALL.to_vec()
}

fn default_shots() -> Vec<usize> {
    vec![5, 10, 20]
}

pub const DEFAULT_RUNS: usize = 4;

impl GridConfig {
    /// Run seeds: the listed ones, or `1..=runs`.
    pub fn run_seeds(&self) -> Result<Vec<u64>, RunError> {
        match (self.runs, self.seeds.is_empty()) {
            (Some(r), false) if r != self.seeds.len() => Err(RunError::Config(format!(
                "runs = {r} but {} seeds are listed",
                self.seeds.len()
            ))),
            (_, false) => Ok(self.seeds.clone()),
            (r, true) => Ok((1..=r.unwrap_or(DEFAULT_RUNS) as u64).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock { behavior: MockBehavior },
    Http(HttpConfig),
}

impl BackendConfig {
    /// Whether completions depend on the run seed.
    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            BackendConfig::Mock {
                behavior: MockBehavior::Corrupt { .. }
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    pub model_id: Option<String>,
    pub max_output_tokens: Option<u32>,
    #[serde(default = "default_backend")]
    pub backend: BackendConfig,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "yes")]
    pub cache: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            preset: default_preset(),
            model_id: None,
            max_output_tokens: None,
            backend: default_backend(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            cache: true,
            cache_dir: None,
        }
    }
}

impl LlmConfig {
    pub fn params(&self) -> GenerationParams {
        let mut p = self.preset.params(self.model_id.as_deref());
        p.max_output_tokens = self.max_output_tokens;
        p
    }
}

fn default_preset() -> Preset {
    Preset::Gpt4
}

fn default_backend() -> BackendConfig {
    BackendConfig::Http(HttpConfig::new(""))
}

fn default_in_flight() -> usize {
    4
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    #[default]
    Fallback,
    Http {
        url: String,
        model: String,
        /// Environment variable holding the shared token, if any.
        token_env: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_boot: default_n_boot(),
            level: default_level(),
            seed: default_eval_seed(),
        }
    }
}

fn default_n_boot() -> usize {
    1000
}

fn default_level() -> f64 {
    0.95
}

fn default_eval_seed() -> u64 {
    42
}

/// An experiment grid over one dataset. Relative paths resolve against the
/// directory of the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    #[serde(default = "default_version")]
    pub version: u32,
    pub name: Option<String>,
    pub dataset: DatasetRef,
    pub prompt: PromptConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_version() -> u32 {
    MANIFEST_VERSION
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentManifest {
    /// Reads a `.toml` or JSON manifest.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let mut m = if is_toml {
            Self::from_toml(&text)?
        } else {
            Self::from_json(&text)?
        };
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(format!("manifest: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(format!("manifest: {e}")))
    }

    /// Resolves a manifest-relative path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn cache_dir(&self) -> PathBuf {
        match &self.llm.cache_dir {
            Some(d) => self.resolve(d),
            None => self.output_dir().join("cache"),
        }
    }

    /// Sets a dotted field, e.g. `grid.shots` to `[5]`. The value is read as
    /// JSON when possible and as a plain string otherwise.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), RunError> {
        let mut doc = serde_json::to_value(&*self).map_err(|e| RunError::Config(e.to_string()))?;
        let parsed: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = match slot {
                Value::Object(o) => o,
                Value::Null => {
                    *slot = Value::Object(Default::default());
                    slot.as_object_mut().expect("just set")
                }
                _ => return Err(RunError::Config(format!("cannot set {key}: {part} is not a table"))),
            };
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), parsed.clone());
                break;
            }
            slot = obj.entry(part.to_string()).or_insert(Value::Null);
        }
        let base_dir = std::mem::take(&mut self.base_dir);
        // The key is never serialized, so carry it over by hand.
        let api_key = match &self.llm.backend {
            BackendConfig::Http(h) => h.api_key.clone(),
            _ => None,
        };
        *self = serde_json::from_value(doc).map_err(|e| RunError::Config(format!("override {key}: {e}")))?;
        self.base_dir = base_dir;
        if let BackendConfig::Http(h) = &mut self.llm.backend {
            if h.api_key.is_none() {
                h.api_key = api_key;
            }
        }
        Ok(())
    }

    /// Checks everything that can be checked without touching the network.
    pub fn validate(&self) -> Result<(), RunError> {
        let cfg = |m: String| Err(RunError::Config(m));
        if self.version != MANIFEST_VERSION {
            return cfg(format!("unsupported manifest version {}", self.version));
        }
        if self.grid.modes.is_empty() || self.grid.shots.is_empty() {
            return cfg("grid needs at least one mode and one shot count".into());
        }
        if self.grid.modes.contains(&Mode::Dynamic) && self.grid.engines.is_empty() {
            return cfg("dynamic mode needs at least one engine".into());
        }
        let seeds = self.grid.run_seeds()?;
        if seeds.is_empty() {
            return cfg("at least one run is required".into());
        }
        let mut uniq = seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != seeds.len() {
            return cfg("run seeds must be distinct".into());
        }
        let d = &self.dataset;
        if d.manifest.is_none() && (d.train.is_none() || d.test.is_none()) {
            return cfg("dataset needs either `manifest` or both `train` and `test`".into());
        }
        if !(self.eval.level > 0.0 && self.eval.level < 1.0) || self.eval.n_boot == 0 {
            return cfg("eval needs n_boot >= 1 and 0 < level < 1".into());
        }
        if self.llm.max_in_flight == 0 {
            return cfg("llm.max_in_flight must be at least 1".into());
        }
        if let BackendConfig::Mock {
            behavior: MockBehavior::Corrupt { rate, .. },
        } = &self.llm.backend
        {
            if !(0.0..=1.0).contains(rate) {
                return cfg(format!("corruption rate {rate} outside [0, 1]"));
            }
        }
        if let Some(order) = &self.prompt.order {
            let mut o = order.clone();
            o.sort();
            o.dedup();
            if o.len() != order.len() || o.len() != ComponentKind::DEFAULT_ORDER.len() {
                return cfg("prompt.order must list each component exactly once".into());
            }
        }
        self.llm
            .params()
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset, RunError> {
        let d = &self.dataset;
        let ds = match &d.manifest {
            Some(m) => load_dataset(&self.resolve(m))?,
            None => {
                let train = self.resolve(d.train.as_deref().unwrap_or(Path::new("")));
                let test = self.resolve(d.test.as_deref().unwrap_or(Path::new("")));
                let name = d.name.clone().unwrap_or_else(|| {
                    train
                        .parent()
                        .and_then(|p| p.file_name())
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "dataset".into())
                });
                load_split_files(&name, &train, &test, d.scheme, d.entity_types.as_deref())?
            }
        };
        if ds.test.is_empty() {
            return Err(RunError::Config(format!("dataset {} has no test sentences", ds.name)));
        }
        Ok(ds)
    }

    /// Content hash of the fields that determine results (paths as written,
    /// grid, prompt, model settings, evaluation). Output and cache locations,
    /// concurrency and retry settings are excluded.
    pub fn hash(&self) -> String {
        let mut m = self.clone();
        m.output_dir = PathBuf::new();
        m.llm.cache = true;
        m.llm.cache_dir = None;
        m.llm.max_in_flight = 1;
        m.llm.retry = RetryPolicy::default();
        if let BackendConfig::Http(h) = &mut m.llm.backend {
            h.api_key = None;
            h.timeout_secs = 0;
        }
        let text = serde_json::to_string(&m).expect("manifest serializes");
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOML: &str = r#"
name = "toy"
output_dir = "out"

[dataset]
train = "data/train.tsv"
test = "data/test.tsv"

[prompt]
fixture = "prompts/reddit.txt"
components = { high_frequency = true }

[grid]
modes = ["static", "dynamic"]
engines = ["tfidf", "late_interaction"]
shots = [5, 10]
seeds = [11, 12]

[llm]
preset = "llama-3"
backend = { kind = "mock", behavior = { kind = "corrupt", rate = 0.5, seed = 7 } }
"#;

    #[test]
    fn toml_and_json_agree() {
        let t = ExperimentManifest::from_toml(TOML).unwrap();
        let j = ExperimentManifest::from_json(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(t, j);
        assert_eq!(t.hash(), j.hash());
        assert_eq!(t.grid.run_seeds().unwrap(), vec![11, 12]);
        assert!(t.llm.backend.is_stochastic());
        assert_eq!(t.llm.params().temperature, 0.5);
        t.validate().unwrap();
    }

    #[test]
    fn overrides() {
        let mut m = ExperimentManifest::from_toml(TOML).unwrap();
        let h = m.hash();
        m.set("grid.shots", "[20]").unwrap();
        assert_eq!(m.grid.shots, vec![20]);
        assert_ne!(m.hash(), h);
        m.set("output_dir", "elsewhere").unwrap();
        assert_eq!(m.output_dir, PathBuf::from("elsewhere"));
        m.set("llm.model_id", "my-model").unwrap();
        assert_eq!(m.llm.params().model_id, "my-model");
        assert!(m.set("grid.shots", "\"lots\"").is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentManifest::from_toml(TOML).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/tmp/x");
        b.llm.max_in_flight = 32;
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn invalid_manifests() {
        let mut m = ExperimentManifest::from_toml(TOML).unwrap();
        m.grid.runs = Some(3);
        assert!(m.validate().is_err());
        let mut m = ExperimentManifest::from_toml(TOML).unwrap();
        m.grid.seeds = vec![1, 1];
        assert!(m.validate().is_err());
        let mut m = ExperimentManifest::from_toml(TOML).unwrap();
        m.grid.engines.clear();
        assert!(m.validate().is_err());
        assert!(ExperimentManifest::from_toml("[dataset]\nbogus = 1").is_err());
    }

    #[test]
    fn default_seeds() {
        let g = GridConfig::default();
        assert_eq!(g.run_seeds().unwrap(), vec![1, 2, 3, 4]);
    }
}
