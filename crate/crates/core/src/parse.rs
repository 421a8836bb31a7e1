//! Turning LLM token-label lists back into per-token BIO labels.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{canonicalize, extract_spans, EntitySpan, Label, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Repair {
    None,
    LengthMismatch,
    TokenMismatch,
    Unparseable,
}

/// Labels aligned one-to-one with the query tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: Vec<Label>,
    pub repair: Repair,
    /// Response items that matched no query token.
    pub dropped_items: usize,
    /// Query tokens that matched no response item and were set to `O`.
    pub filled_items: usize,
    /// Number of items found in the response.
    pub response_items: usize,
}

impl Prediction {
    fn all_outside(n: usize) -> Self {
        Self {
            labels: vec![Label::Outside; n],
            repair: Repair::Unparseable,
            dropped_items: 0,
            filled_items: n,
            response_items: 0,
        }
    }

    pub fn matched_items(&self) -> usize {
        self.labels.len() - self.filled_items
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tag {
    Bio(Label),
    Plain(String),
}

/// Every surface form a label may take in a response: `O`, `B-T`, `I-T`,
/// bare `T`, and the same with `_` written as a space.
#[derive(Debug, Clone, Default)]
pub struct LabelSet {
    forms: HashMap<String, Tag>,
}

impl LabelSet {
    pub fn new(alphabet: &[Label]) -> Self {
        let mut set = Self::default();
        set.forms.insert("O".into(), Tag::Bio(Label::Outside));
        for l in alphabet {
            if let Some(t) = l.entity_type() {
                set.add_type(t);
            }
        }
        set
    }

    pub fn from_types<S: AsRef<str>>(types: &[S]) -> Self {
        Self::new(&crate::corpus::label_alphabet(types))
    }

    fn add_type(&mut self, t: &str) {
        let mut spellings = vec![t.to_string()];
        if t.contains('_') {
            spellings.push(t.replace('_', " "));
        }
        for s in spellings {
            self.forms.insert(format!("B-{s}"), Tag::Bio(Label::Begin(t.into())));
            self.forms.insert(format!("I-{s}"), Tag::Bio(Label::Inside(t.into())));
            self.forms.entry(s).or_insert_with(|| Tag::Plain(t.into()));
        }
    }

    /// Splits `item` at the longest suffix that is a known label, leaving a
    /// non-empty token text. One `-` separating the two is removed.
    fn split<'a>(&self, item: &'a str) -> Option<(&'a str, &Tag)> {
        item.char_indices().skip(1).find_map(|(i, _)| {
            let tag = self.forms.get(&item[i..])?;
            let head = &item[..i];
            let head = head.strip_suffix('-').filter(|h| !h.is_empty()).unwrap_or(head);
            Some((head, tag))
        })
    }
}

/// Reads the first `[...]` list of quoted or bare items, preferring one that
/// follows the last `Output:` marker.
fn bracketed_items(raw: &str) -> Option<Vec<String>> {
    let from = raw.rfind("Output:").map_or(0, |p| p + "Output:".len());
    let scan = |text: &str| {
        let mut rest = text;
        while let Some(open) = rest.find('[') {
            if let Some(items) = list_at(&rest[open + 1..]) {
                return Some(items);
            }
            rest = &rest[open + 1..];
        }
        None
    };
    scan(&raw[from..]).or_else(|| scan(raw))
}

fn list_at(body: &str) -> Option<Vec<String>> {
    let mut items = Vec::new();
    let mut chars = body.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace() || *c == ',') {
            chars.next();
        }
        match chars.peek().copied()? {
            ']' => return Some(items),
            q @ ('\'' | '"') => {
                chars.next();
                let mut item = String::new();
                loop {
                    match chars.next()? {
                        '\\' => item.push(chars.next()?),
                        c if c == q => break,
                        c => item.push(c),
                    }
                }
                items.push(item);
            }
            '[' => return None,
            _ => {
                let mut item = String::new();
                while let Some(&c) = chars.peek() {
                    if c == ',' || c == ']' {
                        break;
                    }
                    if c == '[' || c == '\n' {
                        return None;
                    }
                    item.push(c);
                    chars.next();
                }
                items.push(item.trim().to_string());
            }
        }
    }
}

/// Whitespace-separated `token-LABEL` words, used when no list is present.
fn loose_items(raw: &str, set: &LabelSet) -> Option<Vec<String>> {
    let items: Vec<String> = raw
        .split_whitespace()
        .map(|w| w.trim_matches(|c| c == ',' || c == '\'' || c == '"').to_string())
        .filter(|w| set.split(w).is_some())
        .collect();
    (!items.is_empty()).then_some(items)
}

/// Greedy in-order alignment: each query token takes the next item with the
/// same text (exact first, then case-insensitive); skipped items are dropped.
fn align_greedy(texts: &[&str], query: &[Token]) -> (Vec<Option<usize>>, usize) {
    let mut next = 0;
    let mut dropped = 0;
    let mut assigned = Vec::with_capacity(query.len());
    for tok in query {
        let rest = &texts[next..];
        let hit = rest
            .iter()
            .position(|t| *t == tok.text)
            .or_else(|| rest.iter().position(|t| t.to_lowercase() == tok.text.to_lowercase()));
        match hit {
            Some(off) => {
                dropped += off;
                assigned.push(Some(next + off));
                next += off + 1;
            }
            None => assigned.push(None),
        }
    }
    dropped += texts.len() - next;
    (assigned, dropped)
}

/// Parses a response into labels for `query`. Never fails: unreadable input
/// yields an all-`O` prediction marked [`Repair::Unparseable`].
pub fn parse_response(raw: &str, query: &[Token], labels: &LabelSet) -> Prediction {
    let Some(items) = bracketed_items(raw).or_else(|| loose_items(raw, labels)) else {
        return Prediction::all_outside(query.len());
    };

    let parsed: Vec<(&str, Option<&Tag>)> = items
        .iter()
        .map(|item| match labels.split(item) {
            Some((text, tag)) => (text, Some(tag)),
            None => (item.as_str(), None),
        })
        .collect();
    let texts: Vec<&str> = parsed.iter().map(|(t, _)| *t).collect();

    let (assigned, dropped, mut repair) = if parsed.len() == query.len() {
        let same = texts.iter().zip(query).all(|(t, q)| *t == q.text);
        let repair = if same { Repair::None } else { Repair::TokenMismatch };
        ((0..parsed.len()).map(Some).collect(), 0, repair)
    } else {
        let (assigned, dropped) = align_greedy(&texts, query);
        (assigned, dropped, Repair::LengthMismatch)
    };
    if parsed.iter().any(|(_, tag)| tag.is_none()) && repair == Repair::None {
        repair = Repair::TokenMismatch;
    }

    let mut out: Vec<Label> = Vec::with_capacity(query.len());
    let mut filled = 0;
    for slot in &assigned {
        let label = match slot.and_then(|i| parsed[i].1) {
            Some(Tag::Bio(l)) => l.clone(),
            Some(Tag::Plain(t)) => match out.last() {
                Some(prev) if prev.entity_type() == Some(t.as_str()) => Label::Inside(t.clone()),
                _ => Label::Begin(t.clone()),
            },
            None => Label::Outside,
        };
        if slot.is_none() {
            filled += 1;
        }
        out.push(label);
    }

    Prediction {
        labels: out,
        repair,
        dropped_items: dropped,
        filled_items: filled,
        response_items: items.len(),
    }
}

/// Spans of a prediction, after promoting stray `I-` tags.
pub fn to_spans(p: &Prediction) -> Vec<EntitySpan> {
    let mut labels = p.labels.clone();
    canonicalize(&mut labels);
    extract_spans(&labels)
}
