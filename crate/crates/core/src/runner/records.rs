use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::corpus::Label;
use crate::eval::Counts;
use crate::parse::Repair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    /// The completion failed after retries; scored as all-`O`.
    Failed,
}

/// One test sentence in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sentence_id: String,
    pub status: RecordStatus,
    pub prompt_digest: String,
    pub example_ids: Vec<String>,
    pub raw_text: Option<String>,
    pub labels: Vec<Label>,
    pub repair: Repair,
    pub dropped_items: usize,
    pub filled_items: usize,
    pub counts: Counts,
    pub error: Option<String>,
}

/// Reads the records of a run file. A torn final line (from an interrupted
/// write) is ignored; any other unreadable line is an error.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, RunError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(RunError::io(path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| RunError::Records(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Append-only writer for a run file. Opening truncates any torn final line
/// and reports which sentences are already recorded.
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RecordWriter {
    pub fn open(path: &Path) -> Result<(Self, HashSet<String>), RunError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| RunError::io(parent, e))?;
        }
        let existing = read_records(path)?;
        if let Ok(meta) = fs::metadata(path) {
            let bytes = fs::read(path).map_err(|e| RunError::io(path, e))?;
            let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
            if (keep as u64) < meta.len() {
                log::warn!("{}: dropping a partial trailing record", path.display());
                let f = OpenOptions::new()
                    .write(true)
                    .open(path)
                    .map_err(|e| RunError::io(path, e))?;
                f.set_len(keep as u64).map_err(|e| RunError::io(path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| RunError::io(path, e))?;
        let done = existing.into_iter().map(|r| r.sentence_id).collect();
        Ok((
            Self {
                path: path.to_path_buf(),
                out: BufWriter::new(file),
            },
            done,
        ))
    }

    pub fn append(&mut self, records: &[RunRecord]) -> Result<(), RunError> {
        for r in records {
            let line = serde_json::to_string(r).map_err(|e| RunError::Records(e.to_string()))?;
            self.out
                .write_all(line.as_bytes())
                .and_then(|_| self.out.write_all(b"\n"))
                .map_err(|e| RunError::io(&self.path, e))?;
        }
        self.out.flush().map_err(|e| RunError::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str) -> RunRecord {
        RunRecord {
            sentence_id: id.into(),
            status: RecordStatus::Ok,
            prompt_digest: "d".into(),
            example_ids: vec!["train-000001".into()],
            raw_text: Some("['a-O']".into()),
            labels: vec![Label::Outside],
            repair: Repair::None,
            dropped_items: 0,
            filled_items: 0,
            counts: Counts::default(),
            error: None,
        }
    }

    #[test]
    fn append_then_resume_after_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r").join("run-1.jsonl");
        let (mut w, done) = RecordWriter::open(&path).unwrap();
        assert!(done.is_empty());
        w.append(&[rec("a"), rec("b")]).unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"sentence_id\":\"c\",\"sta").unwrap();
        drop(f);

        assert_eq!(read_records(&path).unwrap().len(), 2);
        let (mut w, done) = RecordWriter::open(&path).unwrap();
        assert_eq!(done, HashSet::from(["a".to_string(), "b".to_string()]));
        w.append(&[rec("c")]).unwrap();
        drop(w);
        let ids: Vec<_> = read_records(&path)
            .unwrap()
            .into_iter()
            .map(|r| r.sentence_id)
            .collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_records(&dir.path().join("none.jsonl")).unwrap().is_empty());
    }

    #[test]
    fn garbage_in_the_middle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        fs::write(&path, "not json\n").unwrap();
        assert!(read_records(&path).is_err());
    }
}
