use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{RetrievalError, SparseVector};

/// Smoothed TF-IDF weight: `tf * (ln((1 + N) / (1 + df)) + 1)`.
pub fn tfidf_weight(term_count: usize, doc_freq: usize, n_docs: usize) -> Result<f64, RetrievalError> {
    if term_count == 0 || doc_freq == 0 || doc_freq > n_docs {
        return Err(RetrievalError::Argument(format!(
            "tfidf_weight needs term_count >= 1 and 1 <= doc_freq <= n_docs (got {term_count}, {doc_freq}, {n_docs})"
        )));
    }
    let idf = ((1.0 + n_docs as f64) / (1.0 + doc_freq as f64)).ln() + 1.0;
    Ok(term_count as f64 * idf)
}

/// Lowercased token texts, used verbatim as terms.
pub fn terms<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.to_lowercase()).or_insert(0) += 1;
    }
    counts
}

/// Sorted vocabulary with document frequencies. Term ids are positions in
/// the sorted list, so they do not depend on document order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    terms: Vec<String>,
    doc_freq: Vec<usize>,
    n_docs: usize,
}

impl Vocabulary {
    pub fn build(docs: &[BTreeMap<String, usize>]) -> Self {
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for d in docs {
            for term in d.keys() {
                *df.entry(term).or_insert(0) += 1;
            }
        }
        let (terms, doc_freq) = df.into_iter().map(|(t, n)| (t.to_string(), n)).unzip();
        Self {
            terms,
            doc_freq,
            n_docs: docs.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> BTreeSet<&str> {
        self.terms.iter().map(String::as_str).collect()
    }

    fn lookup(&self, term: &str) -> Option<usize> {
        self.terms.binary_search_by(|t| t.as_str().cmp(term)).ok()
    }

    /// Weights known terms and L2-normalizes. Unknown terms are ignored.
    pub fn vectorize(&self, counts: &BTreeMap<String, usize>) -> SparseVector {
        let entries = counts
            .iter()
            .filter_map(|(term, &tf)| {
                let id = self.lookup(term)?;
                let w = tfidf_weight(tf, self.doc_freq[id], self.n_docs).ok()?;
                Some((id as u32, w))
            })
            .collect();
        SparseVector::normalized(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ubiquitous_term_has_unit_weight() {
        assert_eq!(tfidf_weight(1, 5, 5).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_weight() {
        // 2 * (ln(4/2) + 1)
        let w = tfidf_weight(2, 1, 3).unwrap();
        assert!((w - 3.386_294_361_119_891).abs() < 1e-12, "{w}");
    }

    #[test]
    fn domain_violations() {
        assert!(tfidf_weight(0, 1, 3).is_err());
        assert!(tfidf_weight(1, 0, 3).is_err());
        assert!(tfidf_weight(1, 4, 3).is_err());
    }

    #[test]
    fn vocabulary_is_union_of_lowercased_tokens() {
        let docs = vec![
            terms(["Withdrawal", "sucks"]),
            terms(["rehab", "withdrawal"]),
            terms(["jail"]),
        ];
        let v = Vocabulary::build(&docs);
        assert_eq!(
            v.terms().into_iter().collect::<Vec<_>>(),
            ["jail", "rehab", "sucks", "withdrawal"]
        );
        let q = v.vectorize(&terms(["unknown"]));
        assert!(q.is_empty());
    }
}
