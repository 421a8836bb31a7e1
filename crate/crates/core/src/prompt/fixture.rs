use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PromptError;

/// Prompt texts for one dataset, read from a sectioned text file:
///
/// ```text
/// # comments before the first section are ignored
/// [task_description]
/// ...
/// [entity_definitions]
/// ...
/// ```
///
/// `task_description`, `entity_definitions` and `format_spec` are required;
/// `dataset_description`, `high_frequency`, `umls_knowledge` and
/// `error_feedback` are optional.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptFixture {
    pub task_description: String,
    pub entity_definitions: String,
    pub format_spec: String,
    pub dataset_description: Option<String>,
    pub high_frequency: Option<String>,
    pub umls_knowledge: Option<String>,
    pub error_feedback: Option<String>,
}

const SECTIONS: [&str; 7] = [
    "task_description",
    "entity_definitions",
    "format_spec",
    "dataset_description",
    "high_frequency",
    "umls_knowledge",
    "error_feedback",
];

impl PromptFixture {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut sections: Vec<(String, Vec<&str>)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                if !SECTIONS.contains(&name) {
                    return Err(PromptError::Fixture(format!(
                        "line {}: unknown section [{name}]",
                        n + 1
                    )));
                }
                if sections.iter().any(|(s, _)| s == name) {
                    return Err(PromptError::Fixture(format!(
                        "line {}: duplicate section [{name}]",
                        n + 1
                    )));
                }
                sections.push((name.to_string(), Vec::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push(line);
            } else if !trimmed.is_empty() && !trimmed.starts_with('#') {
                return Err(PromptError::Fixture(format!(
                    "line {}: text before the first section",
                    n + 1
                )));
            }
        }
        let mut f = PromptFixture::default();
        for (name, body) in sections {
            let text = body.join("\n").trim().to_string();
            let slot = match name.as_str() {
                "task_description" => {
                    f.task_description = text;
                    continue;
                }
                "entity_definitions" => {
                    f.entity_definitions = text;
                    continue;
                }
                "format_spec" => {
                    f.format_spec = text;
                    continue;
                }
                "dataset_description" => &mut f.dataset_description,
                "high_frequency" => &mut f.high_frequency,
                "umls_knowledge" => &mut f.umls_knowledge,
                _ => &mut f.error_feedback,
            };
            *slot = (!text.is_empty()).then_some(text);
        }
        for (name, value) in [
            ("task_description", &f.task_description),
            ("entity_definitions", &f.entity_definitions),
            ("format_spec", &f.format_spec),
        ] {
            if value.is_empty() {
                return Err(PromptError::Fixture(format!("missing required section [{name}]")));
            }
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PromptError::Fixture(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
