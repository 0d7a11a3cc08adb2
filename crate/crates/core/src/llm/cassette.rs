use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{canonical_request, ChatClient, Conversation, LlmError};

/// One recorded exchange, stored as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub request: Value,
    pub response: String,
    /// Seconds since the Unix epoch at recording time.
    pub timestamp: u64,
}

/// Exact-match store of recorded responses keyed by request fingerprint.
#[derive(Debug)]
pub struct Cassette {
    path: PathBuf,
    entries: RwLock<HashMap<String, CassetteEntry>>,
    writer: Option<Mutex<File>>,
}

impl Cassette {
    /// Loads an existing cassette for read-only replay. A missing file is an error.
    pub fn open_replay(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref().to_path_buf();
        if !path.is_file() {
            return Err(cassette_err(&path, "file does not exist"));
        }
        Ok(Cassette {
            entries: RwLock::new(read_entries(&path)?),
            path,
            writer: None,
        })
    }

    /// Opens (or creates) a cassette for appending new recordings.
    pub fn open_record(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.is_file() {
            read_entries(&path)?
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| cassette_err(&path, e))?;
        Ok(Cassette {
            path,
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cassette lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, fingerprint: &str) -> Option<String> {
        self.entries
            .read()
            .expect("cassette lock")
            .get(fingerprint)
            .map(|e| e.response.clone())
    }

    /// Appends an entry. Fingerprints already present are left untouched.
    pub fn append(&self, entry: CassetteEntry) -> Result<(), LlmError> {
        let writer = self
            .writer
            .as_ref()
            .ok_or_else(|| cassette_err(&self.path, "opened read-only"))?;
        let mut entries = self.entries.write().expect("cassette lock");
        if entries.contains_key(&entry.fingerprint) {
            return Ok(());
        }
        let mut line = serde_json::to_string(&entry).map_err(|e| cassette_err(&self.path, e))?;
        line.push('\n');
        let mut file = writer.lock().expect("cassette writer lock");
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| cassette_err(&self.path, e))?;
        entries.insert(entry.fingerprint.clone(), entry);
        Ok(())
    }
}

fn cassette_err(path: &Path, message: impl ToString) -> LlmError {
    LlmError::Cassette {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn read_entries(path: &Path) -> Result<HashMap<String, CassetteEntry>, LlmError> {
    let file = File::open(path).map_err(|e| cassette_err(path, e))?;
    let mut entries = HashMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| cassette_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CassetteEntry = serde_json::from_str(&line)
            .map_err(|e| cassette_err(path, format!("line {}: {e}", idx + 1)))?;
        // first recording wins
        entries.entry(entry.fingerprint.clone()).or_insert(entry);
    }
    Ok(entries)
}

/// Serves completions from a cassette only. Never touches the network.
pub struct ReplayClient {
    model_name: String,
    temperature: f64,
    cassette: Cassette,
}

impl ReplayClient {
    pub fn new(model_name: impl Into<String>, temperature: f64, cassette: Cassette) -> Self {
        ReplayClient {
            model_name: model_name.into(),
            temperature,
            cassette,
        }
    }
}

impl ChatClient for ReplayClient {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn complete(&self, conversation: &Conversation) -> Result<String, LlmError> {
        let fp = self.fingerprint(conversation);
        self.cassette.lookup(&fp).ok_or(LlmError::ReplayMiss(fp))
    }
}

/// Wraps another client and records every new exchange to a cassette.
/// Requests already on the cassette are served from it.
pub struct RecordingClient<C> {
    inner: C,
    cassette: Cassette,
}

impl<C: ChatClient> RecordingClient<C> {
    pub fn new(inner: C, cassette: Cassette) -> Self {
        RecordingClient { inner, cassette }
    }

    pub fn cassette(&self) -> &Cassette {
        &self.cassette
    }
}

impl<C: ChatClient> ChatClient for RecordingClient<C> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }

    fn complete(&self, conversation: &Conversation) -> Result<String, LlmError> {
        let fp = self.fingerprint(conversation);
        if let Some(hit) = self.cassette.lookup(&fp) {
            return Ok(hit);
        }
        let response = self.inner.complete(conversation)?;
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or_default();
        self.cassette.append(CassetteEntry {
            fingerprint: fp,
            request: canonical_request(self.model_name(), conversation, self.temperature()),
            response: response.clone(),
            timestamp,
        })?;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::Turn;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Echo(AtomicUsize);

    impl ChatClient for Echo {
        fn model_name(&self) -> &str {
            "echo"
        }
        fn complete(&self, c: &Conversation) -> Result<String, LlmError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(format!("echo: {}", c.turns.last().unwrap().content))
        }
    }

    fn conv(text: &str) -> Conversation {
        Conversation::new(vec![Turn::user(text)]).unwrap()
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let rec = RecordingClient::new(Echo(AtomicUsize::new(0)), Cassette::open_record(&path).unwrap());
        assert_eq!(rec.complete(&conv("a")).unwrap(), "echo: a");
        assert_eq!(rec.complete(&conv("a")).unwrap(), "echo: a");
        assert_eq!(rec.complete(&conv("b")).unwrap(), "echo: b");
        assert_eq!(rec.inner.0.load(Ordering::SeqCst), 2);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);

        let replay = ReplayClient::new("echo", 0.0, Cassette::open_replay(&path).unwrap());
        assert_eq!(replay.complete(&conv("b")).unwrap(), "echo: b");
        let miss = replay.complete(&conv("zzz")).unwrap_err();
        let fp = replay.fingerprint(&conv("zzz"));
        assert!(matches!(&miss, LlmError::ReplayMiss(f) if *f == fp));
        assert!(miss.to_string().contains(&fp));
    }

    #[test]
    fn replay_requires_existing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Cassette::open_replay(dir.path().join("missing.jsonl")),
            Err(LlmError::Cassette { .. })
        ));
    }

    #[test]
    fn replay_cassette_is_read_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        let c = Cassette::open_replay(&path).unwrap();
        let entry = CassetteEntry {
            fingerprint: "x".into(),
            request: Value::Null,
            response: "r".into(),
            timestamp: 0,
        };
        assert!(c.append(entry).is_err());
    }
}
