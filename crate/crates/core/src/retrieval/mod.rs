//! Example retrieval for dynamic prompts.
//!
//! An [`Index`] stores one representation per training sentence and ranks
//! them against a query by exact scan. Four engines are supported:
//!
//! | engine             | stored representation   | score                      |
//! |--------------------|-------------------------|----------------------------|
//! | `tfidf`            | L2-normalized TF-IDF    | cosine                     |
//! | `dense`            | unit sentence vector    | cosine                     |
//! | `late_interaction` | unit vector per token   | MaxSim                     |
//! | `dual_encoder`     | document-role vector    | raw dot with query vector  |
//!
//! Ties are broken by sentence id so rankings never depend on insertion
//! order.

mod embed;
mod tfidf;
mod vectors;

pub use embed::{
    fallback_sentence_vector, fallback_token_vector, EmbedError, EmbedRequest, EmbedResponse, EmbedText, EmbedVectors,
    EmbeddingProvider, FallbackEmbedder, Granularity, HttpEmbedder, Role, ServiceInfo, FALLBACK_DIM, FALLBACK_MODEL,
};
pub use tfidf::{terms, tfidf_weight, Vocabulary};
pub use vectors::{cosine, dot_product, maxsim, DenseVector, SparseVector, TokenMatrix};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabeledSentence, Token};
use crate::exec::Execution;

/// Snapshot format version written by [`Index::save`].
pub const INDEX_FORMAT_VERSION: u32 = 1;

/// Texts per embedding request while building an index.
const EMBED_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index from an empty training set")]
    EmptyIndex,
    #[error("engine {0} needs an embedding provider")]
    MissingEmbedder(EngineKind),
    #[error("embedding failed for sentence {sentence_id}: {source}")]
    Provider {
        sentence_id: String,
        #[source]
        source: EmbedError,
    },
    #[error("scoring error: {0}")]
    Score(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("index snapshot error: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Tfidf,
    Dense,
    LateInteraction,
    DualEncoder,
}

impl EngineKind {
    pub const ALL: [EngineKind; 4] = [
        EngineKind::Tfidf,
        EngineKind::Dense,
        EngineKind::LateInteraction,
        EngineKind::DualEncoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Tfidf => "tfidf",
            EngineKind::Dense => "dense",
            EngineKind::LateInteraction => "late_interaction",
            EngineKind::DualEncoder => "dual_encoder",
        }
    }

    pub fn needs_embedder(self) -> bool {
        self != EngineKind::Tfidf
    }

    fn roles(self) -> (Role, Role) {
        match self {
            EngineKind::DualEncoder | EngineKind::LateInteraction => (Role::Query, Role::Document),
            _ => (Role::Symmetric, Role::Symmetric),
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EngineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown engine {s:?} (expected tfidf, dense, late_interaction or dual_encoder)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedExample {
    pub sentence_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Engine-specific representation of one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Representation {
    Sparse(SparseVector),
    Dense(DenseVector),
    Tokens(TokenMatrix),
}

/// Scores a query representation against a stored one.
pub fn score(query: &Representation, doc: &Representation, kind: EngineKind) -> Result<f64, RetrievalError> {
    use Representation::*;
    match (kind, query, doc) {
        (EngineKind::Tfidf, Sparse(q), Sparse(d)) => Ok(q.cosine(d)),
        (EngineKind::Dense, Dense(q), Dense(d)) => cosine(q, d),
        (EngineKind::DualEncoder, Dense(q), Dense(d)) => dot_product(q, d),
        (EngineKind::LateInteraction, Tokens(q), Tokens(d)) => maxsim(q, d),
        _ => Err(RetrievalError::Score(format!(
            "representation does not match engine {kind}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    id: String,
    repr: Representation,
}

/// Immutable exact-scan index over training sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    version: u32,
    kind: EngineKind,
    /// Embedding model, empty for TF-IDF.
    model: String,
    dim: usize,
    vocabulary: Option<Vocabulary>,
    entries: Vec<Entry>,
}

fn token_strings(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.text.clone()).collect()
}

fn embed_batch(
    provider: &dyn EmbeddingProvider,
    texts: Vec<Vec<String>>,
    kind: EngineKind,
    role: Role,
) -> Result<(usize, Vec<Representation>), EmbedError> {
    let granularity = if kind == EngineKind::LateInteraction {
        Granularity::Token
    } else {
        Granularity::Sentence
    };
    let req = EmbedRequest {
        texts: texts.into_iter().map(EmbedText::Tokens).collect(),
        granularity,
        role,
        model: provider.model().to_string(),
    };
    let resp = provider.embed(&req)?;
    resp.check_against(&req)?;
    let reprs = resp
        .vectors
        .into_iter()
        .map(|v| match v {
            EmbedVectors::Sentence(values) => {
                let mut d = DenseVector::new(values);
                if kind == EngineKind::Dense {
                    d.normalize();
                }
                Ok(Representation::Dense(d))
            }
            EmbedVectors::Tokens(rows) => {
                let mut m = TokenMatrix::from_rows(rows).map_err(|e| EmbedError::Protocol(e.to_string()))?;
                m.normalize_rows();
                Ok(Representation::Tokens(m))
            }
        })
        .collect::<Result<Vec<_>, EmbedError>>()?;
    Ok((resp.dim, reprs))
}

impl Index {
    /// Builds an index over `train`. Embedding requests are batched and
    /// issued through `exec`; results keep sentence order.
    pub fn build(
        train: &[LabeledSentence],
        kind: EngineKind,
        embedder: Option<&dyn EmbeddingProvider>,
        exec: Execution,
    ) -> Result<Self, RetrievalError> {
        if train.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if kind == EngineKind::Tfidf {
            let counts: Vec<_> = train
                .iter()
                .map(|s| terms(s.tokens.iter().map(|t| t.text.as_str())))
                .collect();
            let vocab = Vocabulary::build(&counts);
            let entries = train
                .iter()
                .zip(&counts)
                .map(|(s, c)| Entry {
                    id: s.id.clone(),
                    repr: Representation::Sparse(vocab.vectorize(c)),
                })
                .collect();
            return Ok(Self {
                version: INDEX_FORMAT_VERSION,
                kind,
                model: String::new(),
                dim: vocab.len(),
                vocabulary: Some(vocab),
                entries,
            });
        }

        let provider = embedder.ok_or(RetrievalError::MissingEmbedder(kind))?;
        let (_, doc_role) = kind.roles();
        let chunks: Vec<&[LabeledSentence]> = train.chunks(EMBED_BATCH).collect();
        let results = exec.map(&chunks, |chunk| {
            let texts = chunk.iter().map(|s| token_strings(&s.tokens)).collect();
            embed_batch(provider, texts, kind, doc_role).map_err(|source| RetrievalError::Provider {
                sentence_id: chunk[0].id.clone(),
                source,
            })
        });
        let mut entries = Vec::with_capacity(train.len());
        let mut dim = None;
        for (chunk, result) in chunks.iter().zip(results) {
            let (d, reprs) = result?;
            if *dim.get_or_insert(d) != d {
                return Err(RetrievalError::Provider {
                    sentence_id: chunk[0].id.clone(),
                    source: EmbedError::Protocol(format!("dimension changed mid-build: {d}")),
                });
            }
            entries.extend(
                chunk
                    .iter()
                    .zip(reprs)
                    .map(|(s, repr)| Entry { id: s.id.clone(), repr }),
            );
        }
        Ok(Self {
            version: INDEX_FORMAT_VERSION,
            kind,
            model: provider.model().to_string(),
            dim: dim.unwrap_or(0),
            vocabulary: None,
            entries,
        })
    }

    pub fn kind(&self) -> EngineKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Vocabulary size for TF-IDF, embedding width otherwise.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn vocabulary(&self) -> Option<&Vocabulary> {
        self.vocabulary.as_ref()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn representation(&self, id: &str) -> Option<&Representation> {
        self.entries.iter().find(|e| e.id == id).map(|e| &e.repr)
    }

    /// Copy of the index without one sentence. Stored vectors (and the
    /// TF-IDF statistics) are kept as they are.
    pub fn without(&self, id: &str) -> Self {
        let mut out = self.clone();
        out.entries.retain(|e| e.id != id);
        out
    }

    /// Encodes query tokens for this index. Labels never participate.
    pub fn encode_query(
        &self,
        tokens: &[Token],
        embedder: Option<&dyn EmbeddingProvider>,
    ) -> Result<Representation, RetrievalError> {
        if let Some(vocab) = &self.vocabulary {
            return Ok(Representation::Sparse(
                vocab.vectorize(&terms(tokens.iter().map(|t| t.text.as_str()))),
            ));
        }
        let provider = embedder.ok_or(RetrievalError::MissingEmbedder(self.kind))?;
        let (query_role, _) = self.kind.roles();
        let (dim, mut reprs) =
            embed_batch(provider, vec![token_strings(tokens)], self.kind, query_role).map_err(|source| {
                RetrievalError::Provider {
                    sentence_id: "<query>".into(),
                    source,
                }
            })?;
        if dim != self.dim {
            return Err(RetrievalError::Score(format!(
                "query dim {dim} vs index dim {}",
                self.dim
            )));
        }
        Ok(reprs.remove(0))
    }

    /// Top `n` sentences by (score desc, id asc).
    pub fn retrieve(
        &self,
        query: &Representation,
        n: usize,
        exec: Execution,
    ) -> Result<Vec<RetrievedExample>, RetrievalError> {
        if n == 0 {
            return Err(RetrievalError::Argument("n must be at least 1".into()));
        }
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let scores = exec
            .map(&self.entries, |e| score(query, &e.repr, self.kind))
            .into_iter()
            .collect::<Result<Vec<f64>, _>>()?;
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.entries[a].id.cmp(&self.entries[b].id))
        });
        Ok(order
            .into_iter()
            .take(n)
            .enumerate()
            .map(|(i, k)| RetrievedExample {
                sentence_id: self.entries[k].id.clone(),
                score: scores[k],
                rank: i + 1,
            })
            .collect())
    }

    /// Encodes `tokens` and retrieves in one call.
    pub fn retrieve_tokens(
        &self,
        tokens: &[Token],
        n: usize,
        embedder: Option<&dyn EmbeddingProvider>,
        exec: Execution,
    ) -> Result<Vec<RetrievedExample>, RetrievalError> {
        let q = self.encode_query(tokens, embedder)?;
        self.retrieve(&q, n, exec)
    }

    pub fn to_json(&self) -> Result<String, RetrievalError> {
        serde_json::to_string(self).map_err(|e| RetrievalError::Snapshot(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, RetrievalError> {
        let idx: Index = serde_json::from_str(s).map_err(|e| RetrievalError::Snapshot(e.to_string()))?;
        if idx.version != INDEX_FORMAT_VERSION {
            return Err(RetrievalError::Snapshot(format!(
                "unsupported index version {} (expected {INDEX_FORMAT_VERSION})",
                idx.version
            )));
        }
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        std::fs::write(path, self.to_json()?).map_err(|e| RetrievalError::Snapshot(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let s =
            std::fs::read_to_string(path).map_err(|e| RetrievalError::Snapshot(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

/// Builds an index with the default execution strategy.
pub fn build_index(
    train: &[LabeledSentence],
    kind: EngineKind,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<Index, RetrievalError> {
    Index::build(train, kind, embedder, Execution::default())
}
