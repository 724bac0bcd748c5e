//! Request digests and the line-delimited fixture store used for record and
//! replay runs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{BackendError, Endpoint, Transport};

/// Serializes `v` with object keys sorted at every depth. String contents are
/// left untouched: prompts are byte-significant.
pub fn canonical_json(v: &Value) -> String {
    fn sorted(v: &Value) -> Value {
        match v {
            Value::Object(map) => {
                let ordered: BTreeMap<&String, Value> = map.iter().map(|(k, v)| (k, sorted(v))).collect();
                Value::Object(ordered.into_iter().map(|(k, v)| (k.clone(), v)).collect())
            }
            Value::Array(items) => Value::Array(items.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sorted(v)).expect("json value serializes")
}

/// SHA-256 over the endpoint name and the canonical request body.
pub fn request_digest(endpoint: Endpoint, body: &Value) -> String {
    let mut h = Sha256::new();
    h.update(endpoint.name().as_bytes());
    h.update(b"\n");
    h.update(canonical_json(body).as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub digest: String,
    pub endpoint: Endpoint,
    pub response: Value,
}

/// Serves recorded responses; any request without a fixture is a miss.
#[derive(Debug, Default)]
pub struct ReplayTransport {
    responses: HashMap<String, Value>,
}

impl ReplayTransport {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, BackendError> {
        let mut responses = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord = serde_json::from_str(line)
                .map_err(|e| BackendError::Malformed(format!("fixture line {}: {e}", i + 1)))?;
            responses.entry(rec.digest).or_insert(rec.response);
        }
        Ok(Self { responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Transport for ReplayTransport {
    fn post(&self, endpoint: Endpoint, body: &Value) -> Result<Value, BackendError> {
        let digest = request_digest(endpoint, body);
        self.responses
            .get(&digest)
            .cloned()
            .ok_or(BackendError::FixtureMiss { digest })
    }
}

struct Sink {
    writer: BufWriter<File>,
    written: HashSet<String>,
}

/// Forwards to an inner transport and appends every new response to a
/// fixture file. Writes are serialized; a digest is written at most once.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    path: PathBuf,
    sink: Mutex<Sink>,
}

impl RecordingTransport {
    pub fn create(inner: Arc<dyn Transport>, path: &Path) -> Result<Self, BackendError> {
        let io = |e: std::io::Error| BackendError::Io(format!("{}: {e}", path.display()));
        let mut written = HashSet::new();
        if path.exists() {
            let existing = fs::read_to_string(path).map_err(io)?;
            for line in existing.lines().filter(|l| !l.trim().is_empty()) {
                if let Ok(rec) = serde_json::from_str::<FixtureRecord>(line) {
                    written.insert(rec.digest);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            sink: Mutex::new(Sink {
                writer: BufWriter::new(file),
                written,
            }),
        })
    }

    pub fn record_fixture(&self, digest: &str, endpoint: Endpoint, response: &Value) -> Result<(), BackendError> {
        let mut sink = self.sink.lock().expect("fixture sink poisoned");
        if !sink.written.insert(digest.to_string()) {
            return Ok(());
        }
        let rec = FixtureRecord {
            digest: digest.to_string(),
            endpoint,
            response: response.clone(),
        };
        let line = serde_json::to_string(&rec).expect("fixture serializes");
        writeln!(sink.writer, "{line}")
            .and_then(|_| sink.writer.flush())
            .map_err(|e| BackendError::Io(format!("{}: {e}", self.path.display())))
    }
}

impl Transport for RecordingTransport {
    fn post(&self, endpoint: Endpoint, body: &Value) -> Result<Value, BackendError> {
        let response = self.inner.post(endpoint, body)?;
        self.record_fixture(&request_digest(endpoint, body), endpoint, &response)?;
        Ok(response)
    }
}

/// Rewrites a fixture file sorted by digest so that recordings made with
/// concurrent requests are byte-stable.
pub fn sort_fixture_file(path: &Path) -> Result<usize, BackendError> {
    let io = |e: std::io::Error| BackendError::Io(format!("{}: {e}", path.display()));
    let text = fs::read_to_string(path).map_err(io)?;
    let mut records = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: FixtureRecord =
            serde_json::from_str(line).map_err(|e| BackendError::Malformed(format!("fixture: {e}")))?;
        records.entry(rec.digest.clone()).or_insert(rec);
    }
    let mut out = String::new();
    for rec in records.values() {
        out.push_str(&serde_json::to_string(rec).expect("fixture serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io)?;
    Ok(records.len())
}
