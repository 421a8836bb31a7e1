use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{canonicalize, CorpusError, Dataset, Label, LabeledSentence, Split, Token};

/// Label scheme of the second column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// `O`, `B-T`, `I-T`.
    #[default]
    Bio,
    /// Bare class names (`O`, `Disease`); runs of equal adjacent classes
    /// become one span.
    Plain,
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bio" => Ok(Scheme::Bio),
            "plain" => Ok(Scheme::Plain),
            other => Err(format!("unknown label scheme {other:?} (expected bio or plain)")),
        }
    }
}

/// Sidecar JSON describing a dataset's split files and entity alphabet.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default)]
    pub scheme: Scheme,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub entity_types: Option<Vec<String>>,
}

/// Reads two-column `token<TAB>label` lines. Blank lines separate
/// sentences; runs of blank lines never produce empty sentences.
///
/// Returns the sentences and the number of stray `I-` labels repaired.
pub fn read_conll<R: BufRead>(
    reader: R,
    scheme: Scheme,
    split: Split,
    alphabet: Option<&[String]>,
) -> Result<(Vec<LabeledSentence>, usize), CorpusError> {
    let mut sentences = Vec::new();
    let mut repairs = 0;
    let mut tokens: Vec<String> = Vec::new();
    let mut raw: Vec<String> = Vec::new();
    let mut first_line = 0;

    let mut flush = |tokens: &mut Vec<String>, raw: &mut Vec<String>, first_line: usize| {
        if tokens.is_empty() {
            return Ok(());
        }
        let mut labels = match scheme {
            Scheme::Bio => raw
                .iter()
                .enumerate()
                .map(|(k, l)| {
                    l.parse::<Label>().map_err(|_| CorpusError::Label {
                        line: first_line + k,
                        label: l.clone(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
            Scheme::Plain => plain_to_bio(raw),
        };
        if let Some(allowed) = alphabet {
            for (k, l) in labels.iter().enumerate() {
                if let Some(t) = l.entity_type() {
                    if !allowed.iter().any(|a| a == t) {
                        return Err(CorpusError::Label {
                            line: first_line + k,
                            label: raw[k].clone(),
                        });
                    }
                }
            }
        }
        repairs += canonicalize(&mut labels);
        let id = format!("{}-{:06}", split, sentences.len());
        sentences.push(LabeledSentence {
            id,
            tokens: tokens
                .drain(..)
                .enumerate()
                .map(|(index, text)| Token { text, index })
                .collect(),
            labels,
            split,
        });
        raw.clear();
        Ok(())
    };

    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            flush(&mut tokens, &mut raw, first_line)?;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(CorpusError::Parse {
                line: lineno,
                message: format!("expected 2 tab-separated columns, found {}", cols.len()),
            });
        }
        let (tok, label) = (cols[0], cols[1].trim());
        if tok.is_empty() || tok.chars().any(char::is_whitespace) {
            return Err(CorpusError::Parse {
                line: lineno,
                message: format!("token {tok:?} is empty or contains whitespace"),
            });
        }
        if label.is_empty() {
            return Err(CorpusError::Parse {
                line: lineno,
                message: "empty label".into(),
            });
        }
        if tokens.is_empty() {
            first_line = lineno;
        }
        tokens.push(tok.to_string());
        raw.push(label.to_string());
    }
    flush(&mut tokens, &mut raw, first_line)?;
    Ok((sentences, repairs))
}

/// Run-length groups bare class names into BIO.
fn plain_to_bio(raw: &[String]) -> Vec<Label> {
    let mut prev: Option<&str> = None;
    raw.iter()
        .map(|l| {
            if l == "O" {
                prev = None;
                Label::Outside
            } else {
                let label = if prev == Some(l.as_str()) {
                    Label::Inside(l.clone())
                } else {
                    Label::Begin(l.clone())
                };
                prev = Some(l);
                label
            }
        })
        .collect()
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path).map(BufReader::new).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads one two-column file as the training split of a dataset named after
/// the file stem.
pub fn load_conll(path: &Path, scheme: Scheme) -> Result<Dataset, CorpusError> {
    let (train, repairs) = read_conll(open(path)?, scheme, Split::Train, None)?;
    if train.is_empty() {
        return Err(CorpusError::Empty(path.display().to_string()));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut d = Dataset::new(name, train, Vec::new())?;
    d.label_repairs = repairs;
    Ok(d)
}

/// Loads a dataset through its sidecar manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, CorpusError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|source| CorpusError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    load_split_files(
        &manifest.name,
        &base.join(&manifest.train),
        &base.join(&manifest.test),
        manifest.scheme,
        manifest.entity_types.as_deref(),
    )
}

/// Loads explicit train/test files.
pub fn load_split_files(
    name: &str,
    train_path: &Path,
    test_path: &Path,
    scheme: Scheme,
    alphabet: Option<&[String]>,
) -> Result<Dataset, CorpusError> {
    let (train, r1) = read_conll(open(train_path)?, scheme, Split::Train, alphabet)?;
    let (test, r2) = read_conll(open(test_path)?, scheme, Split::Test, alphabet)?;
    if train.is_empty() && test.is_empty() {
        return Err(CorpusError::Empty(name.to_string()));
    }
    let mut d = Dataset::new(name, train, test)?;
    d.label_repairs = r1 + r2;
    Ok(d)
}

/// Writes sentences in the two-column BIO format, one blank line after each.
pub fn write_conll<'a, W: Write>(
    sentences: impl IntoIterator<Item = &'a LabeledSentence>,
    mut out: W,
) -> std::io::Result<()> {
    for s in sentences {
        for (tok, label) in s.tokens.iter().zip(&s.labels) {
            writeln!(out, "{}\t{}", tok.text, label)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{extract_spans, EntitySpan};
    use proptest::prelude::*;

    fn read(text: &str, scheme: Scheme) -> Result<(Vec<LabeledSentence>, usize), CorpusError> {
        read_conll(text.as_bytes(), scheme, Split::Train, None)
    }

    #[test]
    fn codeine_block() {
        let (s, repairs) = read(
            "codeine\tB-Clinical_Impacts\naddict.\tI-Clinical_Impacts\n",
            Scheme::Bio,
        )
        .unwrap();
        assert_eq!(repairs, 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 2);
        assert_eq!(
            extract_spans(&s[0].labels),
            vec![EntitySpan::new(0, 2, "Clinical_Impacts")]
        );
    }

    #[test]
    fn consecutive_blank_lines_are_skipped() {
        let (s, _) = read("a\tO\n\n\n\nb\tO\n\n", Scheme::Bio).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].id, "train-000001");
    }

    #[test]
    fn plain_scheme_run_length_groups() {
        let (s, _) = read("a\tO\nb\tDisease\nc\tDisease\nd\tO\ne\tDisease\n", Scheme::Plain).unwrap();
        let got: Vec<String> = s[0].labels.iter().map(|l| l.to_string()).collect();
        assert_eq!(got, ["O", "B-Disease", "I-Disease", "O", "B-Disease"]);
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let err = read("a\tO\nb O\n", Scheme::Bio).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
        let err = read("a\tO\tX\n", Scheme::Bio).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
    }

    #[test]
    fn unknown_bio_label_is_label_error() {
        let err = read("a\tO\nb\tDisease\n", Scheme::Bio).unwrap_err();
        assert!(matches!(err, CorpusError::Label { line: 2, .. }), "{err}");
    }

    #[test]
    fn label_outside_declared_alphabet_rejected() {
        let allowed = vec!["Disease".to_string()];
        let err = read_conll("a\tB-Chemical\n".as_bytes(), Scheme::Bio, Split::Test, Some(&allowed)).unwrap_err();
        assert!(matches!(err, CorpusError::Label { line: 1, .. }));
    }

    #[test]
    fn stray_inside_is_repaired_and_counted() {
        let (s, repairs) = read("a\tI-Disease\nb\tI-Disease\nc\tO\nd\tI-Chemical\n", Scheme::Bio).unwrap();
        assert_eq!(repairs, 2);
        assert_eq!(s[0].labels[0], Label::Begin("Disease".into()));
        assert_eq!(s[0].labels[3], Label::Begin("Chemical".into()));
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.tsv");
        std::fs::write(&p, "\n\n").unwrap();
        assert!(matches!(load_conll(&p, Scheme::Bio), Err(CorpusError::Empty(_))));
    }

    fn arb_sentences() -> impl Strategy<Value = Vec<(Vec<String>, Vec<Label>)>> {
        let label = prop_oneof![
            Just(Label::Outside),
            (0..2usize).prop_map(|t| Label::Begin(["Disease", "CONDITION/SYMPTOM"][t].into())),
            (0..2usize).prop_map(|t| Label::Inside(["Disease", "CONDITION/SYMPTOM"][t].into())),
        ];
        let row = ("[a-zA-Z0-9.,'/-]{1,8}", label);
        proptest::collection::vec(proptest::collection::vec(row, 1..10), 1..8)
            .prop_map(|ss| ss.into_iter().map(|rows| rows.into_iter().unzip()).collect())
    }

    proptest! {
        #[test]
        fn write_then_read_is_identity(raw in arb_sentences()) {
            let sentences: Vec<LabeledSentence> = raw
                .iter()
                .enumerate()
                .map(|(i, (t, l))| LabeledSentence::new(format!("train-{i:06}"), Split::Train, t, l.clone()))
                .collect();
            let mut buf = Vec::new();
            write_conll(&sentences, &mut buf).unwrap();
            let (back, repairs) = read_conll(buf.as_slice(), Scheme::Bio, Split::Train, None).unwrap();
            prop_assert_eq!(repairs, 0);
            prop_assert_eq!(back, sentences);
        }
    }
}
