use std::collections::{BTreeMap, HashMap};
use std::sync::{Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatRequest, CompletionBackend};
use crate::corpus::{label_alphabet, Label, Token};
use crate::prompt::render_pairs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockBehavior {
    /// Answers with the registered gold labels.
    GoldEcho,
    /// Replaces each gold label, with probability `rate`, by a different
    /// label drawn uniformly from the alphabet.
    Corrupt { rate: f64, seed: u64 },
    /// Answers with the text mapped to the prompt digest.
    Fixture { responses: BTreeMap<String, String> },
}

type Registered = HashMap<String, (Vec<Token>, Vec<Label>)>;

/// Offline completion backend keyed by prompt digest.
pub struct MockLlm {
    behavior: MockBehavior,
    alphabet: Vec<Label>,
    gold: RwLock<Registered>,
    emitted: Mutex<HashMap<String, Vec<Label>>>,
}

impl MockLlm {
    pub fn new<S: AsRef<str>>(behavior: MockBehavior, entity_types: &[S]) -> Self {
        Self {
            behavior,
            alphabet: label_alphabet(entity_types),
            gold: RwLock::new(HashMap::new()),
            emitted: Mutex::new(HashMap::new()),
        }
    }

    pub fn behavior(&self) -> &MockBehavior {
        &self.behavior
    }

    /// Records the query behind a prompt digest.
    pub fn register(&self, digest: &str, tokens: &[Token], labels: &[Label]) {
        self.gold
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(digest.to_string(), (tokens.to_vec(), labels.to_vec()));
    }

    /// Labels most recently emitted for a digest.
    pub fn emitted(&self, digest: &str) -> Option<Vec<Label>> {
        self.emitted
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(digest)
            .cloned()
    }

    /// The labels `Corrupt { rate, seed }` produces for `gold` under `digest`.
    pub fn corrupt_labels(&self, gold: &[Label], rate: f64, seed: u64, digest: &str) -> Vec<Label> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, digest));
        gold.iter()
            .map(|g| {
                if !rng.gen_bool(rate.clamp(0.0, 1.0)) {
                    return g.clone();
                }
                let wrong: Vec<&Label> = self.alphabet.iter().filter(|l| *l != g).collect();
                if wrong.is_empty() {
                    g.clone()
                } else {
                    wrong[rng.gen_range(0..wrong.len())].clone()
                }
            })
            .collect()
    }

    pub fn respond(&self, digest: &str) -> Result<String, BackendError> {
        if let MockBehavior::Fixture { responses } = &self.behavior {
            return responses
                .get(digest)
                .cloned()
                .ok_or_else(|| BackendError::Config(format!("no fixture response for prompt {digest}")));
        }
        let gold = self.gold.read().unwrap_or_else(|e| e.into_inner());
        let (tokens, labels) = gold
            .get(digest)
            .ok_or_else(|| BackendError::Config(format!("no gold registered for prompt {digest}")))?;
        let out = match &self.behavior {
            MockBehavior::Corrupt { rate, seed } => self.corrupt_labels(labels, *rate, *seed, digest),
            _ => labels.clone(),
        };
        let text = render_pairs(tokens, &out);
        self.emitted
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(digest.to_string(), out);
        Ok(text)
    }
}

fn stream_seed(seed: u64, digest: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(digest.as_bytes());
    let bytes: [u8; 8] = h.finalize()[..8].try_into().expect("sha256 has 32 bytes");
    u64::from_le_bytes(bytes)
}

impl CompletionBackend for MockLlm {
    fn tag(&self) -> String {
        match &self.behavior {
            MockBehavior::GoldEcho => "mock:gold_echo".into(),
            MockBehavior::Corrupt { rate, seed } => format!("mock:corrupt:{rate}:{seed}"),
            MockBehavior::Fixture { .. } => "mock:fixture".into(),
        }
    }

    fn endpoint(&self) -> String {
        "mock://".into()
    }

    fn send(&self, req: &ChatRequest<'_>) -> Result<String, BackendError> {
        self.respond(req.prompt_digest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokens_from;
    use crate::parse::{parse_response, LabelSet};

    const TYPES: [&str; 1] = ["Clinical_Impacts"];

    fn codeine() -> (Vec<Token>, Vec<Label>) {
        let labels = ["O", "O", "O", "B-Clinical_Impacts", "I-Clinical_Impacts"]
            .iter()
            .map(|l| l.parse().unwrap())
            .collect();
        (tokens_from(&["I", "was", "a", "codeine", "addict."]), labels)
    }

    #[test]
    fn gold_echo_renders_and_parses_back() {
        let m = MockLlm::new(MockBehavior::GoldEcho, &TYPES);
        let (t, l) = codeine();
        m.register("d", &t, &l);
        let text = m.respond("d").unwrap();
        assert_eq!(
            text,
            "['I-O', 'was-O', 'a-O', 'codeine-B-Clinical_Impacts', 'addict.-I-Clinical_Impacts']"
        );
        assert_eq!(parse_response(&text, &t, &LabelSet::from_types(&TYPES)).labels, l);
    }

    #[test]
    fn zero_rate_is_gold_echo_and_full_rate_flips_everything() {
        let (t, l) = codeine();
        let zero = MockLlm::new(MockBehavior::Corrupt { rate: 0.0, seed: 9 }, &TYPES);
        zero.register("d", &t, &l);
        assert_eq!(zero.emitted("d"), None);
        zero.respond("d").unwrap();
        assert_eq!(zero.emitted("d").unwrap(), l);

        let all = MockLlm::new(MockBehavior::Corrupt { rate: 1.0, seed: 9 }, &TYPES);
        all.register("d", &t, &l);
        all.respond("d").unwrap();
        let out = all.emitted("d").unwrap();
        assert!(out.iter().zip(&l).all(|(a, b)| a != b));

        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(9, "d"));
        let alphabet = label_alphabet(&TYPES);
        let replay: Vec<Label> = l
            .iter()
            .map(|g| {
                assert!(rng.gen_bool(1.0));
                let wrong: Vec<_> = alphabet.iter().filter(|x| *x != g).collect();
                wrong[rng.gen_range(0..wrong.len())].clone()
            })
            .collect();
        assert_eq!(out, replay);
    }

    #[test]
    fn corruption_is_reproducible() {
        let (t, l) = codeine();
        let a = MockLlm::new(MockBehavior::Corrupt { rate: 0.5, seed: 3 }, &TYPES);
        let b = MockLlm::new(MockBehavior::Corrupt { rate: 0.5, seed: 3 }, &TYPES);
        a.register("d", &t, &l);
        b.register("d", &t, &l);
        assert_eq!(a.respond("d").unwrap(), b.respond("d").unwrap());
    }

    #[test]
    fn fixture_hit_and_miss() {
        let responses = BTreeMap::from([("d".to_string(), "canned \u{1F600} text".to_string())]);
        let m = MockLlm::new(MockBehavior::Fixture { responses }, &TYPES);
        assert_eq!(m.respond("d").unwrap(), "canned \u{1F600} text");
        assert!(matches!(m.respond("x"), Err(BackendError::Config(_))));
    }

    #[test]
    fn unregistered_digest_is_config_error() {
        let m = MockLlm::new(MockBehavior::GoldEcho, &TYPES);
        assert!(matches!(m.respond("nope"), Err(BackendError::Config(_))));
    }
}
