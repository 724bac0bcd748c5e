//! Domain records, dataset ingestion, the containment labeling rule and the
//! seeded calibration/test split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::scorers::ScorerKind;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("reference answer is empty after normalization")]
    EmptyReference,
    #[error("dataset of {0} examples is too small to populate both folds")]
    TooSmall(usize),
    #[error("calibration fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
}

/// One scored item: input `x`, candidate response `z`, and whatever is known
/// about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: String,
    pub response: String,
    /// 1 = permissible, 0 = hallucination.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<String>>,
    #[serde(flatten)]
    pub extras: BTreeMap<String, Value>,
}

impl Example {
    pub fn new(id: impl Into<String>, input: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            input: input.into(),
            response: response.into(),
            label: None,
            reference_answer: None,
            samples: None,
            extras: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn sample_count(&self) -> usize {
        self.samples.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Builds a dataset, enforcing id uniqueness and label range.
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(DataError::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.id.clone()).collect()
    }

    /// Replaces `labels` of each example by the containment rule where a
    /// reference answer is present and the label is not already set.
    pub fn label_missing_by_containment(&mut self) -> Result<usize, DataError> {
        let mut labelled = 0;
        for ex in &mut self.examples {
            if ex.label.is_none() {
                if let Some(reference) = &ex.reference_answer {
                    ex.label = Some(label_by_containment(reference, &ex.response)?);
                    labelled += 1;
                }
            }
        }
        Ok(labelled)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let io_err = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        for ex in &self.examples {
            let line = serde_json::to_string(ex).expect("example serializes");
            writeln!(w, "{line}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}

/// Reads a line-delimited dataset file. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_dataset(&name, &text)
}

pub fn parse_dataset(name: &str, text: &str) -> Result<Dataset, DataError> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(l) = ex.label {
            if l > 1 {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: format!("label must be 0 or 1, got {l}"),
                });
            }
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Dataset::new(name, examples)
}

fn is_edge_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercased, NFKC-normalized text with surrounding punctuation removed and
/// whitespace runs collapsed. Internal punctuation is kept.
pub fn normalize_text(t: &str) -> String {
    let folded: String = t.nfkc().collect::<String>().to_lowercase();
    let trimmed = folded.trim_matches(|c: char| c.is_whitespace() || is_edge_punctuation(c));
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1 when the normalized reference occurs inside the normalized response.
pub fn label_by_containment(reference: &str, response: &str) -> Result<u8, DataError> {
    let reference = normalize_text(reference);
    if reference.is_empty() {
        return Err(DataError::EmptyReference);
    }
    Ok(u8::from(normalize_text(response).contains(&reference)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub calibration_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub seed: u64,
}

impl SplitAssignment {
    /// Stable identifier of the calibration fold, used to detect calibrators
    /// fitted on a different split.
    pub fn split_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for id in &self.calibration_ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn is_calibration(&self, id: &str) -> bool {
        self.calibration_ids.contains(id)
    }
}

/// Seeded shuffle split; the calibration fold holds `round(fraction * n)` ids.
pub fn split_dataset(d: &Dataset, calib_fraction: f64, seed: u64) -> Result<SplitAssignment, DataError> {
    split_ids(&d.ids(), calib_fraction, seed)
}

/// Same as [`split_dataset`] over an ordered id list.
pub fn split_ids(ids: &[String], calib_fraction: f64, seed: u64) -> Result<SplitAssignment, DataError> {
    if !(calib_fraction > 0.0 && calib_fraction < 1.0) {
        return Err(DataError::BadFraction(calib_fraction));
    }
    let n = ids.len();
    let n_cal = (calib_fraction * n as f64).round() as usize;
    if n < 2 || n_cal == 0 || n_cal >= n {
        return Err(DataError::TooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let calibration_ids = order[..n_cal].iter().map(|&i| ids[i].clone()).collect();
    let test_ids = order[n_cal..].iter().map(|&i| ids[i].clone()).collect();
    Ok(SplitAssignment {
        calibration_ids,
        test_ids,
        seed,
    })
}

/// One scorer's output for one example, oriented as probability of permissible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub example_id: String,
    pub scorer: ScorerKind,
    pub value: f64,
    pub llm_calls: u32,
    #[serde(default)]
    pub raw: Value,
}

/// Dense example × scorer grid with a missing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scorers: Vec<ScorerKind>,
    pub example_ids: Vec<String>,
    values: Vec<Option<f64>>,
    /// Error text for cells that could not be scored, keyed by (row, col).
    pub errors: BTreeMap<(usize, usize), String>,
}

impl ScoreMatrix {
    pub fn new(example_ids: Vec<String>, scorers: Vec<ScorerKind>) -> Self {
        let cells = example_ids.len() * scorers.len();
        Self {
            scorers,
            example_ids,
            values: vec![None; cells],
            errors: BTreeMap::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.example_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.scorers.len()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.scorers.len() + col]
    }

    /// Sets a cell; values outside [0,1] are a caller bug.
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        assert!((0.0..=1.0).contains(&value), "score {value} outside [0,1]");
        self.values[row * self.scorers.len() + col] = Some(value);
    }

    pub fn clear(&mut self, row: usize, col: usize) {
        self.values[row * self.scorers.len() + col] = None;
    }

    pub fn column(&self, col: usize) -> Vec<Option<f64>> {
        (0..self.n_rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.example_ids.iter().position(|e| e == id)
    }

    pub fn col_of(&self, kind: &ScorerKind) -> Option<usize> {
        self.scorers.iter().position(|k| k == kind)
    }

    pub fn present_count(&self, col: usize) -> usize {
        (0..self.n_rows()).filter(|&r| self.get(r, col).is_some()).count()
    }

    /// Assembles a matrix from cached records. Cells without a record are missing.
    pub fn from_records(example_ids: Vec<String>, scorers: Vec<ScorerKind>, records: &[ScoreRecord]) -> Self {
        let mut m = Self::new(example_ids, scorers);
        for rec in records {
            if let (Some(r), Some(c)) = (m.row_of(&rec.example_id), m.col_of(&rec.scorer)) {
                m.set(r, c, rec.value.clamp(0.0, 1.0));
            }
        }
        m
    }
}
