//! Few-shot biomedical NER with static and retrieval-augmented prompts.
//!
//! The crate is organised as a pipeline:
//!
//! * [`corpus`] loads two-column BIO corpora, decodes entity spans and
//!   derives per-type frequency lexicons.
//! * [`retrieval`] indexes training sentences under one of four scoring
//!   engines (TF-IDF, dense, late interaction, dual encoder).
//! * [`prompt`] assembles system/user messages from prompt fixtures and
//!   annotated examples.
//! * [`llm`] talks to an OpenAI-compatible chat endpoint, or to a
//!   deterministic mock.
//! * [`parse`] turns token-label responses back into aligned BIO labels.
//! * [`eval`] scores strict entity-level micro P/R/F1 with percentile
//!   bootstrap intervals.
//! * [`runner`] drives the mode x engine x shots grid from a manifest.
//!
//! Data-parallel loops (retrieval scans, bootstrap resamples, per-sentence
//! LLM calls) run on rayon when the `parallel` feature is enabled and fall
//! back to plain iterators otherwise. See [`exec`].

pub mod corpus;
pub mod eval;
pub mod exec;
pub mod llm;
pub mod parse;
pub mod prompt;
pub mod retrieval;
pub mod runner;

pub use corpus::{Dataset, EntitySpan, LabeledSentence, Token};
pub use eval::MetricReport;
pub use prompt::PromptBundle;
pub use retrieval::{EngineKind, RetrievedExample};
