//! Prompt assembly for static and retrieval-augmented few-shot NER.
//!
//! The system message carries the base prompt (task description, entity
//! definitions, output format). The user message carries, in order, the
//! enabled optional components, the annotated examples, and finally the
//! query input line.

mod fixture;
mod format;

pub use fixture::PromptFixture;
pub use format::{format_example, quote_item, render_input, render_list, render_output, render_pairs, ExampleFormat};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Dataset, FrequencyLexicon, LabeledSentence, Token};
use crate::retrieval::EngineKind;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt fixture: {0}")]
    Fixture(String),
    #[error("entity type {0:?} has no training sentence to sample from")]
    Sampling(String),
    #[error("invalid example config: {0}")]
    Config(String),
    #[error("query has no tokens")]
    EmptyQuery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasePrompt {
    pub task_description: String,
    pub entity_definitions: String,
    pub format_spec: String,
}

/// High-frequency instances, either derived from training data or given as
/// literal text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighFrequency {
    Lexicon(FrequencyLexicon),
    Text(String),
}

impl HighFrequency {
    pub fn render(&self) -> String {
        match self {
            HighFrequency::Lexicon(l) => l.render(),
            HighFrequency::Text(t) => t.clone(),
        }
    }
}

/// An optional prompt component: included only when enabled and non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component<T> {
    pub enabled: bool,
    pub content: Option<T>,
}

impl<T> Default for Component<T> {
    fn default() -> Self {
        Self {
            enabled: false,
            content: None,
        }
    }
}

impl<T> Component<T> {
    pub fn on(content: T) -> Self {
        Self {
            enabled: true,
            content: Some(content),
        }
    }

    pub fn off(content: Option<T>) -> Self {
        Self {
            enabled: false,
            content,
        }
    }

    fn active(&self) -> Option<&T> {
        self.content.as_ref().filter(|_| self.enabled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    DatasetDescription,
    HighFrequency,
    UmlsKnowledge,
    ErrorFeedback,
    Examples,
}

impl ComponentKind {
    pub const DEFAULT_ORDER: [ComponentKind; 5] = [
        ComponentKind::DatasetDescription,
        ComponentKind::HighFrequency,
        ComponentKind::UmlsKnowledge,
        ComponentKind::ErrorFeedback,
        ComponentKind::Examples,
    ];

    pub fn key(self) -> &'static str {
        match self {
            ComponentKind::DatasetDescription => "dataset_description",
            ComponentKind::HighFrequency => "high_frequency",
            ComponentKind::UmlsKnowledge => "umls_knowledge",
            ComponentKind::ErrorFeedback => "error_feedback",
            ComponentKind::Examples => "examples",
        }
    }

    fn heading(self) -> &'static str {
        match self {
            ComponentKind::DatasetDescription => "[Dataset Description]:",
            ComponentKind::HighFrequency => "[High-Frequency Instances]:",
            ComponentKind::UmlsKnowledge => "[UMLS Knowledge]:",
            ComponentKind::ErrorFeedback => "[Error Analysis]:",
            ComponentKind::Examples => "[Examples]:",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleMode {
    StaticRandom,
    DynamicRetrieved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// `k` sentences for every entity type.
    PerLabel,
    /// `k` sentences in total.
    Total,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleBlockConfig {
    pub mode: ExampleMode,
    pub k: usize,
    pub format: ExampleFormat,
    pub sampling: Sampling,
    pub seed: Option<u64>,
    pub engine: Option<EngineKind>,
}

impl ExampleBlockConfig {
    pub fn static_random(k: usize, seed: u64) -> Self {
        Self {
            mode: ExampleMode::StaticRandom,
            k,
            format: ExampleFormat::default(),
            sampling: Sampling::PerLabel,
            seed: Some(seed),
            engine: None,
        }
    }

    pub fn dynamic(k: usize, engine: EngineKind) -> Self {
        Self {
            mode: ExampleMode::DynamicRetrieved,
            k,
            format: ExampleFormat::default(),
            sampling: Sampling::Total,
            seed: None,
            engine: Some(engine),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        match self.mode {
            ExampleMode::StaticRandom if self.seed.is_none() => {
                Err(PromptError::Config("static_random sampling needs a seed".into()))
            }
            ExampleMode::DynamicRetrieved if self.engine.is_none() => {
                Err(PromptError::Config("dynamic_retrieved examples need an engine".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptComponents {
    pub base: BasePrompt,
    pub dataset_description: Component<String>,
    pub high_freq: Component<HighFrequency>,
    pub umls_knowledge: Component<String>,
    pub error_feedback: Component<String>,
    pub examples: ExampleBlockConfig,
    /// Order of the user-message components; must be a permutation of
    /// [`ComponentKind::DEFAULT_ORDER`].
    pub order: Vec<ComponentKind>,
}

impl PromptComponents {
    /// Base prompt from a fixture, every optional component present but off.
    pub fn from_fixture(f: &PromptFixture, examples: ExampleBlockConfig) -> Self {
        Self {
            base: BasePrompt {
                task_description: f.task_description.clone(),
                entity_definitions: f.entity_definitions.clone(),
                format_spec: f.format_spec.clone(),
            },
            dataset_description: Component::off(f.dataset_description.clone()),
            high_freq: Component::off(f.high_frequency.clone().map(HighFrequency::Text)),
            umls_knowledge: Component::off(f.umls_knowledge.clone()),
            error_feedback: Component::off(f.error_feedback.clone()),
            examples,
            order: ComponentKind::DEFAULT_ORDER.to_vec(),
        }
    }

    fn text_of(&self, kind: ComponentKind) -> Option<String> {
        match kind {
            ComponentKind::DatasetDescription => self.dataset_description.active().cloned(),
            ComponentKind::HighFrequency => self.high_freq.active().map(HighFrequency::render),
            ComponentKind::UmlsKnowledge => self.umls_knowledge.active().cloned(),
            ComponentKind::ErrorFeedback => self.error_feedback.active().cloned(),
            ComponentKind::Examples => None,
        }
        .filter(|t| !t.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_message: String,
    pub user_message: String,
    pub included_example_ids: Vec<String>,
    /// Component key -> included.
    pub component_provenance: BTreeMap<String, bool>,
}

impl PromptBundle {
    /// SHA-256 over both messages, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_message.as_bytes());
        h.update([0u8]);
        h.update(self.user_message.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Draws static examples from the training split. `PerLabel` takes `k`
/// sentences containing each entity type and deduplicates by id; `Total`
/// takes `k` sentences uniformly without replacement.
pub fn sample_static_examples(d: &Dataset, cfg: &ExampleBlockConfig) -> Result<Vec<LabeledSentence>, PromptError> {
    if cfg.mode != ExampleMode::StaticRandom {
        return Err(PromptError::Config(
            "sample_static_examples needs static_random mode".into(),
        ));
    }
    cfg.validate()?;
    if cfg.k == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or_default());
    let picked: Vec<&LabeledSentence> = match cfg.sampling {
        Sampling::Total => {
            let all: Vec<&LabeledSentence> = d.train.iter().collect();
            all.choose_multiple(&mut rng, cfg.k).copied().collect()
        }
        Sampling::PerLabel => {
            let mut out: Vec<&LabeledSentence> = Vec::new();
            for etype in &d.entity_types {
                let pool: Vec<&LabeledSentence> = d
                    .train
                    .iter()
                    .filter(|s| s.spans().iter().any(|sp| &sp.etype == etype))
                    .collect();
                if pool.is_empty() {
                    return Err(PromptError::Sampling(etype.clone()));
                }
                for s in pool.choose_multiple(&mut rng, cfg.k) {
                    if !out.iter().any(|o| o.id == s.id) {
                        out.push(s);
                    }
                }
            }
            out
        }
    };
    Ok(picked.into_iter().cloned().collect())
}

/// Assembles the prompt. Output is a pure function of the inputs.
pub fn build_prompt(
    components: &PromptComponents,
    examples: &[LabeledSentence],
    query_tokens: &[Token],
) -> Result<PromptBundle, PromptError> {
    if query_tokens.is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let mut order = components.order.clone();
    order.sort();
    order.dedup();
    if order.len() != ComponentKind::DEFAULT_ORDER.len() || order.len() != components.order.len() {
        return Err(PromptError::Config(
            "component order must list each component once".into(),
        ));
    }

    let base = &components.base;
    let system_message = format!(
        "[Task Description]: {}\n\n[Entity Types with Definitions]: {}\n\n[Format Specification]: {}",
        base.task_description.trim(),
        base.entity_definitions.trim(),
        base.format_spec.trim()
    );

    let mut provenance = BTreeMap::from([("base".to_string(), true)]);
    let mut blocks: Vec<String> = Vec::new();
    for &kind in &components.order {
        let body = match kind {
            ComponentKind::Examples => (!examples.is_empty()).then(|| {
                examples
                    .iter()
                    .map(|s| format_example(s, components.examples.format))
                    .collect::<Vec<_>>()
                    .join("\n\n")
            }),
            other => components.text_of(other),
        };
        provenance.insert(kind.key().to_string(), body.is_some());
        if let Some(body) = body {
            blocks.push(format!("{}\n{}", kind.heading(), body.trim_end()));
        }
    }
    blocks.push(format!(
        "[Query]:\n{}",
        render_input(query_tokens, components.examples.format)
    ));

    Ok(PromptBundle {
        system_message,
        user_message: blocks.join("\n\n"),
        included_example_ids: examples.iter().map(|s| s.id.clone()).collect(),
        component_provenance: provenance,
    })
}
