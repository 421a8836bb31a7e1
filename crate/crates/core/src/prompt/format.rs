use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabeledSentence, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleFormat {
    /// Input is the raw sentence, output the token-label list.
    SentenceInTokensOut,
    /// Input is the token list, output the token-label list.
    #[default]
    TokensInTokensOut,
}

/// Single-quoted list item; `\` and `'` are backslash-escaped.
pub fn quote_item(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        if c == '\\' || c == '\'' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('\'');
    out
}

pub fn render_list<I, S>(items: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let quoted: Vec<String> = items.into_iter().map(|s| quote_item(s.as_ref())).collect();
    format!("[{}]", quoted.join(", "))
}

/// The `Input:` line for a token sequence.
pub fn render_input(tokens: &[Token], format: ExampleFormat) -> String {
    let texts = tokens.iter().map(|t| t.text.as_str());
    match format {
        ExampleFormat::TokensInTokensOut => format!("Input: {}", render_list(texts)),
        ExampleFormat::SentenceInTokensOut => {
            format!("Input: {}", render_list([texts.collect::<Vec<_>>().join(" ")]))
        }
    }
}

/// `['tok-LABEL', ...]` for a labeled sentence.
pub fn render_output(s: &LabeledSentence) -> String {
    render_pairs(&s.tokens, &s.labels)
}

/// `['tok-LABEL', ...]` for parallel token and label slices.
pub fn render_pairs(tokens: &[Token], labels: &[Label]) -> String {
    render_list(tokens.iter().zip(labels).map(|(t, l)| format!("{}-{}", t.text, l)))
}

/// An annotated example as an `Input:`/`Output:` pair.
pub fn format_example(s: &LabeledSentence, format: ExampleFormat) -> String {
    format!("{}\nOutput: {}", render_input(&s.tokens, format), render_output(s))
}
