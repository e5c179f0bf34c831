//! Append-only score log keyed by `(backend_tag, content hash)`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PerplexityScore, Result, ScoreError};
use crate::corpus::Example;

/// Digest of everything that identifies an example's scored text.
pub fn content_hash(ex: &Example) -> String {
    let mut h = Sha256::new();
    for part in [&ex.id, &ex.task, &ex.input_text, &ex.output_text] {
        h.update(part.as_bytes());
        h.update([0x1f]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    backend_tag: String,
    content_hash: String,
    id: String,
    perplexity: f64,
}

type Key = (String, String);

/// Concurrent reads, serialized writes. A file-backed cache is compacted on
/// open and appended to afterwards.
#[derive(Debug, Default)]
pub struct ScoreCache {
    entries: RwLock<HashMap<Key, f64>>,
    log: Mutex<Option<(PathBuf, File)>>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` (last record per key wins), rewrites it compacted, and
    /// keeps it open for appends.
    pub fn open(path: &Path) -> Result<Self> {
        let err = |message: String| ScoreError::Cache { path: path.display().to_string(), message };
        let mut entries: HashMap<Key, Entry> = HashMap::new();
        if path.exists() {
            let file = File::open(path).map_err(|e| err(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                // A torn final line from an interrupted run is dropped.
                let Ok(e) = serde_json::from_str::<Entry>(&line) else {
                    log::warn!("{}: skipping unreadable line {}", path.display(), i + 1);
                    continue;
                };
                entries.insert((e.backend_tag.clone(), e.content_hash.clone()), e);
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        }
        let mut sorted: Vec<&Entry> = entries.values().collect();
        sorted.sort_by(|a, b| (&a.backend_tag, &a.id, &a.content_hash).cmp(&(&b.backend_tag, &b.id, &b.content_hash)));
        let mut buf = Vec::new();
        for e in sorted {
            serde_json::to_writer(&mut buf, e).expect("entry serializes");
            buf.push(b'\n');
        }
        let tmp = path.with_extension("compact");
        std::fs::write(&tmp, &buf).and_then(|_| std::fs::rename(&tmp, path)).map_err(|e| err(e.to_string()))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| err(e.to_string()))?;
        let map = entries.into_iter().map(|(k, e)| (k, e.perplexity)).collect();
        Ok(Self { entries: RwLock::new(map), log: Mutex::new(Some((path.to_path_buf(), file))) })
    }

    pub fn get(&self, backend_tag: &str, ex: &Example) -> Option<f64> {
        let key = (backend_tag.to_string(), content_hash(ex));
        self.entries.read().expect("cache lock").get(&key).copied()
    }

    /// Records a batch of scores: one append, one map update.
    pub fn insert_many(&self, scored: &[(&Example, &PerplexityScore)]) -> Result<()> {
        if scored.is_empty() {
            return Ok(());
        }
        let rows: Vec<Entry> = scored
            .iter()
            .map(|(ex, s)| Entry {
                backend_tag: s.backend_tag.clone(),
                content_hash: content_hash(ex),
                id: ex.id.clone(),
                perplexity: s.perplexity,
            })
            .collect();
        let mut log = self.log.lock().expect("cache log lock");
        if let Some((path, file)) = log.as_mut() {
            let mut buf = Vec::new();
            for r in &rows {
                serde_json::to_writer(&mut buf, r).expect("entry serializes");
                buf.push(b'\n');
            }
            file.write_all(&buf)
                .and_then(|_| file.flush())
                .map_err(|e| ScoreError::Cache { path: path.display().to_string(), message: e.to_string() })?;
        }
        let mut map = self.entries.write().expect("cache lock");
        for r in rows {
            map.insert((r.backend_tag, r.content_hash), r.perplexity);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of entries recorded under `backend_tag`.
    pub fn count_for_tag(&self, backend_tag: &str) -> usize {
        self.entries.read().expect("cache lock").keys().filter(|(t, _)| t == backend_tag).count()
    }
}
