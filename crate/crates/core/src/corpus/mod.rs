//! Pre-tokenized BIO corpora: labels, sentences, span decoding and statistics.

mod conll;
mod lexicon;

pub use conll::{load_conll, load_dataset, load_split_files, read_conll, write_conll, DatasetManifest, Scheme};
pub use lexicon::{frequency_lexicon, FrequencyLexicon, DEFAULT_LEXICON_SIZE};

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown label {label:?}")]
    Label { line: usize, label: String },
    #[error("{0} contains no sentences")]
    Empty(String),
    #[error("invalid dataset manifest: {0}")]
    Manifest(String),
    #[error("duplicate sentence id {0}")]
    DuplicateId(String),
}

/// A BIO tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Outside,
    Begin(String),
    Inside(String),
}

impl Label {
    /// Entity type carried by the tag, `None` for `O`.
    pub fn entity_type(&self) -> Option<&str> {
        match self {
            Label::Outside => None,
            Label::Begin(t) | Label::Inside(t) => Some(t),
        }
    }

    pub fn is_outside(&self) -> bool {
        matches!(self, Label::Outside)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Outside => f.write_str("O"),
            Label::Begin(t) => write!(f, "B-{t}"),
            Label::Inside(t) => write!(f, "I-{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not a BIO label: {0:?}")]
pub struct LabelParseError(pub String);

impl FromStr for Label {
    type Err = LabelParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(Label::Outside);
        }
        let typed = |rest: &str| {
            if rest.is_empty() || rest.chars().any(char::is_whitespace) {
                Err(LabelParseError(s.to_string()))
            } else {
                Ok(rest.to_string())
            }
        };
        if let Some(rest) = s.strip_prefix("B-") {
            typed(rest).map(Label::Begin)
        } else if let Some(rest) = s.strip_prefix("I-") {
            typed(rest).map(Label::Inside)
        } else {
            Err(LabelParseError(s.to_string()))
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub index: usize,
}

/// Builds a token list from raw strings, assigning ordinals.
pub fn tokens_from<S: AsRef<str>>(texts: &[S]) -> Vec<Token> {
    texts
        .iter()
        .enumerate()
        .map(|(index, t)| Token {
            text: t.as_ref().to_string(),
            index,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub id: String,
    pub tokens: Vec<Token>,
    pub labels: Vec<Label>,
    pub split: Split,
}

impl LabeledSentence {
    /// Builds a sentence from parallel token/label lists. Labels are
    /// canonicalized; panics if the lists differ in length.
    pub fn new<S: AsRef<str>>(id: impl Into<String>, split: Split, tokens: &[S], labels: Vec<Label>) -> Self {
        assert_eq!(tokens.len(), labels.len(), "token/label length mismatch");
        let mut labels = labels;
        canonicalize(&mut labels);
        Self {
            id: id.into(),
            tokens: tokens_from(tokens),
            labels,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    pub fn spans(&self) -> Vec<EntitySpan> {
        extract_spans(&self.labels)
    }
}

/// Half-open typed span `[start, end)` over token indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub etype: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, etype: impl Into<String>) -> Self {
        Self {
            start,
            end,
            etype: etype.into(),
        }
    }
}

/// Rewrites every `I-T` that does not continue an open `T` span to `B-T`.
/// Returns the number of labels rewritten.
pub fn canonicalize(labels: &mut [Label]) -> usize {
    let mut repairs = 0;
    let mut open: Option<String> = None;
    for label in labels.iter_mut() {
        match label {
            Label::Outside => open = None,
            Label::Begin(t) => open = Some(t.clone()),
            Label::Inside(t) => {
                if open.as_deref() != Some(t.as_str()) {
                    let t = std::mem::take(t);
                    open = Some(t.clone());
                    *label = Label::Begin(t);
                    repairs += 1;
                }
            }
        }
    }
    repairs
}

/// Decodes maximal spans: `B-T` opens a span, following `I-T` extend it,
/// anything else closes it. A stray `I-T` with no open `T` span is not part
/// of any span; run [`canonicalize`] first to promote those.
pub fn extract_spans(labels: &[Label]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, label) in labels.iter().enumerate() {
        match label {
            Label::Inside(t) if open.is_some_and(|(_, ot)| ot == t) => {}
            _ => {
                if let Some((start, etype)) = open.take() {
                    spans.push(EntitySpan::new(start, i, etype));
                }
                if let Label::Begin(t) = label {
                    open = Some((i, t));
                }
            }
        }
    }
    if let Some((start, etype)) = open {
        spans.push(EntitySpan::new(start, labels.len(), etype));
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub train: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
    pub entity_types: Vec<String>,
    /// Stray `I-` labels promoted to `B-` while loading.
    #[serde(default)]
    pub label_repairs: usize,
}

impl Dataset {
    /// Assembles a dataset, deriving the entity alphabet from the labels and
    /// checking id uniqueness.
    pub fn new(
        name: impl Into<String>,
        train: Vec<LabeledSentence>,
        test: Vec<LabeledSentence>,
    ) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for s in train.iter().chain(&test) {
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
        }
        let entity_types = train
            .iter()
            .chain(&test)
            .flat_map(|s| s.labels.iter().filter_map(Label::entity_type))
            .map(str::to_string)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            name: name.into(),
            train,
            test,
            entity_types,
            label_repairs: 0,
        })
    }

    /// `O` plus `B-`/`I-` for every entity type.
    pub fn label_alphabet(&self) -> Vec<Label> {
        label_alphabet(&self.entity_types)
    }

    pub fn sentences(&self) -> impl Iterator<Item = &LabeledSentence> {
        self.train.iter().chain(&self.test)
    }
}

pub fn label_alphabet<S: AsRef<str>>(entity_types: &[S]) -> Vec<Label> {
    let mut out = vec![Label::Outside];
    for t in entity_types {
        out.push(Label::Begin(t.as_ref().to_string()));
        out.push(Label::Inside(t.as_ref().to_string()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub train_tokens: usize,
    pub test_tokens: usize,
    pub train_entities: usize,
    pub test_entities: usize,
    pub entities: usize,
    pub entity_types: usize,
    pub label_repairs: usize,
}

pub fn dataset_stats(d: &Dataset) -> DatasetStats {
    let tokens = |ss: &[LabeledSentence]| ss.iter().map(LabeledSentence::len).sum::<usize>();
    let entities = |ss: &[LabeledSentence]| ss.iter().map(|s| s.spans().len()).sum::<usize>();
    let train_entities = entities(&d.train);
    let test_entities = entities(&d.test);
    DatasetStats {
        name: d.name.clone(),
        train_sentences: d.train.len(),
        test_sentences: d.test.len(),
        train_tokens: tokens(&d.train),
        test_tokens: tokens(&d.test),
        train_entities,
        test_entities,
        entities: train_entities + test_entities,
        entity_types: d.entity_types.len(),
        label_repairs: d.label_repairs,
    }
}
