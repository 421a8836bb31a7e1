//! Embedding providers: the wire schema shared with the embedding service,
//! an HTTP client for it, and an offline hashing fallback.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::vectors::normalize_in_place;

/// Dimensionality of the hashing fallback.
pub const FALLBACK_DIM: usize = 256;
pub const FALLBACK_MODEL: &str = "fallback-hash-3gram-256";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Sentence,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Document,
    Symmetric,
}

/// A pre-tokenized sentence or a raw string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmbedText {
    Tokens(Vec<String>),
    Raw(String),
}

impl EmbedText {
    fn token_strs(&self) -> Vec<&str> {
        match self {
            EmbedText::Tokens(t) => t.iter().map(String::as_str).collect(),
            EmbedText::Raw(s) => s.split_whitespace().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<EmbedText>,
    pub granularity: Granularity,
    pub role: Role,
    pub model: String,
}

/// Per-text output: one vector (sentence) or one row per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmbedVectors {
    Sentence(Vec<f64>),
    Tokens(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub vectors: Vec<EmbedVectors>,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub models: Vec<String>,
    pub dims: BTreeMap<String, usize>,
    #[serde(default)]
    pub roles: Vec<Role>,
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid embed request: {0}")]
    InvalidRequest(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("embedding service error {status}: {message}")]
    Service { status: u16, message: String },
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("malformed embedding response: {0}")]
    Protocol(String),
}

pub trait EmbeddingProvider: Send + Sync {
    fn model(&self) -> &str;
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, EmbedError>;
}

impl EmbedRequest {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.texts.is_empty() {
            return Err(EmbedError::InvalidRequest("texts is empty".into()));
        }
        for (i, t) in self.texts.iter().enumerate() {
            if self.granularity == Granularity::Token && matches!(t, EmbedText::Raw(_)) {
                return Err(EmbedError::InvalidRequest(format!(
                    "text {i}: token granularity requires token lists"
                )));
            }
            if t.token_strs().is_empty() {
                return Err(EmbedError::InvalidRequest(format!("text {i} has no tokens")));
            }
        }
        Ok(())
    }
}

impl EmbedResponse {
    /// Checks count, dimensionality and token-row agreement with `req`.
    pub fn check_against(&self, req: &EmbedRequest) -> Result<(), EmbedError> {
        if self.vectors.len() != req.texts.len() {
            return Err(EmbedError::Protocol(format!(
                "{} vectors for {} texts",
                self.vectors.len(),
                req.texts.len()
            )));
        }
        for (i, (v, t)) in self.vectors.iter().zip(&req.texts).enumerate() {
            match (req.granularity, v) {
                (Granularity::Sentence, EmbedVectors::Sentence(x)) if x.len() == self.dim => {}
                (Granularity::Token, EmbedVectors::Tokens(rows))
                    if rows.len() == t.token_strs().len() && rows.iter().all(|r| r.len() == self.dim) => {}
                _ => return Err(EmbedError::Protocol(format!("text {i}: shape disagrees with request"))),
            }
            let finite = match v {
                EmbedVectors::Sentence(x) => x.iter().all(|f| f.is_finite()),
                EmbedVectors::Tokens(rows) => rows.iter().flatten().all(|f| f.is_finite()),
            };
            if !finite {
                return Err(EmbedError::Protocol(format!("text {i}: non-finite value")));
            }
        }
        Ok(())
    }
}

/// FNV-1a, 64-bit. Stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed feature hashing of the character 3-grams of `<token>` (lowercased),
/// L2-normalized.
pub fn fallback_token_vector(token: &str) -> Vec<f64> {
    let padded: Vec<char> = std::iter::once('<')
        .chain(token.to_lowercase().chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut v = vec![0.0; FALLBACK_DIM];
    let mut buf = String::new();
    for w in padded.windows(3) {
        buf.clear();
        buf.extend(w);
        let h = fnv1a(buf.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % FALLBACK_DIM as u64) as usize] += sign;
    }
    ensure_nonzero(&mut v, token);
    normalize_in_place(&mut v);
    v
}

/// Normalized mean of the token vectors.
pub fn fallback_sentence_vector(tokens: &[&str]) -> Vec<f64> {
    let mut v = vec![0.0; FALLBACK_DIM];
    for t in tokens {
        for (acc, x) in v.iter_mut().zip(fallback_token_vector(t)) {
            *acc += x;
        }
    }
    if !tokens.is_empty() {
        let n = tokens.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
    }
    ensure_nonzero(&mut v, &tokens.join(" "));
    normalize_in_place(&mut v);
    v
}

// Colliding n-grams with opposite signs can cancel exactly.
fn ensure_nonzero(v: &mut [f64], key: &str) {
    if v.iter().all(|x| *x == 0.0) {
        let h = fnv1a(key.as_bytes());
        v[(h % v.len() as u64) as usize] = 1.0;
    }
}

/// Deterministic offline provider implementing the embedding service schema.
/// It has a single encoder, so query and document roles coincide.
#[derive(Debug, Clone, Default)]
pub struct FallbackEmbedder;

impl EmbeddingProvider for FallbackEmbedder {
    fn model(&self) -> &str {
        FALLBACK_MODEL
    }

    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, EmbedError> {
        req.validate()?;
        let vectors = req
            .texts
            .iter()
            .map(|t| {
                let toks = t.token_strs();
                match req.granularity {
                    Granularity::Sentence => EmbedVectors::Sentence(fallback_sentence_vector(&toks)),
                    Granularity::Token => EmbedVectors::Tokens(toks.iter().map(|t| fallback_token_vector(t)).collect()),
                }
            })
            .collect();
        Ok(EmbedResponse {
            dim: FALLBACK_DIM,
            vectors,
            model: req.model.clone(),
        })
    }
}

/// Client for the embedding service (`POST /embed`, `GET /info`).
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            token: None,
            client,
        })
    }

    /// Shared-token header sent as `Authorization: Bearer <token>`.
    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    fn request(&self, rb: reqwest::blocking::RequestBuilder) -> Result<String, EmbedError> {
        let rb = match &self.token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        };
        let resp = rb.send().map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| EmbedError::Transport(e.to_string()))?;
        match status {
            200..=299 => Ok(body),
            404 => Err(EmbedError::UnknownModel(self.model.clone())),
            _ => Err(EmbedError::Service { status, message: body }),
        }
    }

    pub fn info(&self) -> Result<ServiceInfo, EmbedError> {
        let body = self.request(self.client.get(format!("{}/info", self.base_url)))?;
        serde_json::from_str(&body).map_err(|e| EmbedError::Protocol(e.to_string()))
    }

    pub fn healthy(&self) -> bool {
        self.client
            .get(format!("{}/healthz", self.base_url))
            .send()
            .map(|r| r.status().is_success())
            .unwrap_or(false)
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn model(&self) -> &str {
        &self.model
    }

    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, EmbedError> {
        req.validate()?;
        let body = self.request(self.client.post(format!("{}/embed", self.base_url)).json(req))?;
        let resp: EmbedResponse = serde_json::from_str(&body).map_err(|e| EmbedError::Protocol(e.to_string()))?;
        resp.check_against(req)?;
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let a = fallback_token_vector("withdrawal");
        let b = fallback_token_vector("withdrawal");
        assert_eq!(a, b);
        assert!((a.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        assert_eq!(a.len(), FALLBACK_DIM);
    }

    #[test]
    fn single_token_sentence_equals_token_vector() {
        let s = fallback_sentence_vector(&["rehab"]);
        let t = fallback_token_vector("rehab");
        for (x, y) in s.iter().zip(&t) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_trigrams_raise_similarity() {
        let w = fallback_token_vector("withdrawal");
        let wp = fallback_token_vector("withdrawal.");
        let j = fallback_token_vector("jail");
        let near = cos(&w, &wp);
        let far = cos(&w, &j);
        assert!(near > far, "{near} vs {far}");
        assert!(near > 0.7);
    }

    #[test]
    fn request_validation() {
        let mut req = EmbedRequest {
            texts: vec![],
            granularity: Granularity::Sentence,
            role: Role::Symmetric,
            model: "m".into(),
        };
        assert!(FallbackEmbedder.embed(&req).is_err());
        req.texts = vec![EmbedText::Raw("a b".into())];
        req.granularity = Granularity::Token;
        assert!(FallbackEmbedder.embed(&req).is_err());
        req.granularity = Granularity::Sentence;
        let resp = FallbackEmbedder.embed(&req).unwrap();
        resp.check_against(&req).unwrap();
    }

    #[test]
    fn wire_schema_shapes() {
        let req: EmbedRequest = serde_json::from_str(
            r#"{"texts":[["I","was"],"raw text"],"granularity":"sentence","role":"query","model":"m"}"#,
        )
        .unwrap();
        assert_eq!(req.texts[1], EmbedText::Raw("raw text".into()));
        let resp = FallbackEmbedder.embed(&req).unwrap();
        let json = serde_json::to_value(&resp).unwrap();
        assert_eq!(json["dim"], 256);
        assert_eq!(json["vectors"][0].as_array().unwrap().len(), 256);
        let tok_req = EmbedRequest {
            texts: vec![EmbedText::Tokens(vec!["a".into(), "b".into(), "c".into()])],
            granularity: Granularity::Token,
            role: Role::Document,
            model: "m".into(),
        };
        let resp = FallbackEmbedder.embed(&tok_req).unwrap();
        let back: EmbedResponse = serde_json::from_str(&serde_json::to_string(&resp).unwrap()).unwrap();
        assert_eq!(back, resp);
        match &back.vectors[0] {
            EmbedVectors::Tokens(rows) => assert_eq!(rows.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
