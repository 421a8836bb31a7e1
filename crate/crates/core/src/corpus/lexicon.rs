use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Dataset;

/// Lexicon size used by the reference prompts.
pub const DEFAULT_LEXICON_SIZE: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub word: String,
    pub count: usize,
}

/// Most frequent lowercased words inside the spans of each entity type,
/// ordered by count descending then word ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrequencyLexicon {
    pub per_type: Vec<(String, Vec<LexiconEntry>)>,
}

impl FrequencyLexicon {
    pub fn words(&self, etype: &str) -> Vec<&str> {
        self.per_type
            .iter()
            .find(|(t, _)| t == etype)
            .map(|(_, es)| es.iter().map(|e| e.word.as_str()).collect())
            .unwrap_or_default()
    }

    /// One prompt sentence per non-empty type, e.g.
    /// `In this dataset, high-frequency 'Disease' include 'pain', 'renal'.`
    pub fn render(&self) -> String {
        self.per_type
            .iter()
            .filter(|(_, es)| !es.is_empty())
            .map(|(t, es)| {
                let words: Vec<String> = es.iter().map(|e| format!("'{}'", e.word)).collect();
                format!("In this dataset, high-frequency '{}' include {}.", t, words.join(", "))
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Counts lowercased tokens inside spans of each type over the training
/// split and keeps the `top_k` most frequent per type.
pub fn frequency_lexicon(d: &Dataset, top_k: usize) -> FrequencyLexicon {
    let top_k = top_k.max(1);
    let mut counts: HashMap<String, HashMap<String, usize>> = HashMap::new();
    for s in &d.train {
        for span in s.spans() {
            let bucket = counts.entry(span.etype).or_default();
            for tok in &s.tokens[span.start..span.end] {
                *bucket.entry(tok.text.to_lowercase()).or_default() += 1;
            }
        }
    }
    let per_type = d
        .entity_types
        .iter()
        .map(|t| {
            let mut entries: Vec<LexiconEntry> = counts
                .remove(t.as_str())
                .unwrap_or_default()
                .into_iter()
                .map(|(word, count)| LexiconEntry { word, count })
                .collect();
            entries.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.word.cmp(&b.word)));
            entries.truncate(top_k);
            (t.clone(), entries)
        })
        .collect();
    FrequencyLexicon { per_type }
}
