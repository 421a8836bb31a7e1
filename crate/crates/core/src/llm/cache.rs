use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LlmError;

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    raw_text: String,
}

/// Completion texts stored as `<dir>/<key[..2]>/<key>.json`.
#[derive(Debug, Clone)]
pub struct CompletionCache {
    dir: PathBuf,
}

impl CompletionCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| LlmError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2.min(key.len())]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<String>, LlmError> {
        let path = self.path(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(LlmError::Cache(format!("{}: {e}", path.display()))),
        };
        match serde_json::from_str::<Entry>(&text) {
            Ok(entry) if entry.key == key => Ok(Some(entry.raw_text)),
            _ => {
                log::warn!("ignoring unreadable cache entry {}", path.display());
                Ok(None)
            }
        }
    }

    /// Writes through a temporary file so readers never see a partial entry.
    pub fn put(&self, key: &str, raw_text: &str) -> Result<(), LlmError> {
        let path = self.path(key);
        let err = |e: std::io::Error| LlmError::Cache(format!("{}: {e}", path.display()));
        let parent = path.parent().unwrap_or(&self.dir);
        fs::create_dir_all(parent).map_err(err)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(err)?;
        let body = serde_json::to_vec(&Entry {
            key: key.to_string(),
            raw_text: raw_text.to_string(),
        })
        .map_err(|e| LlmError::Cache(e.to_string()))?;
        tmp.write_all(&body).map_err(err)?;
        tmp.persist(&path).map_err(|e| err(e.error))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let c = CompletionCache::open(dir.path()).unwrap();
        assert_eq!(c.get("abcdef").unwrap(), None);
        c.put("abcdef", "['x-O']").unwrap();
        assert_eq!(c.get("abcdef").unwrap().as_deref(), Some("['x-O']"));
        assert!(dir.path().join("ab").join("abcdef.json").exists());
    }

    #[test]
    fn corrupt_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let c = CompletionCache::open(dir.path()).unwrap();
        fs::create_dir_all(dir.path().join("ab")).unwrap();
        fs::write(dir.path().join("ab").join("abcd.json"), "{not json").unwrap();
        assert_eq!(c.get("abcd").unwrap(), None);
    }
}
