//! Score cache written by the scoring stage: a header line, then one line
//! per example with its raw scores, cell errors and optional embedding.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ScoreMatrix;
use crate::scorers::ScorerKind;

pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dataset: String,
    scorers: Vec<ScorerKind>,
    examples: usize,
    total_llm_calls: u64,
    generations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Line {
    id: String,
    label: Option<u8>,
    values: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    errors: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCache {
    pub dataset: String,
    pub labels: Vec<Option<u8>>,
    pub matrix: ScoreMatrix,
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub total_llm_calls: u64,
    pub generations: u64,
}

impl ScoreCache {
    pub fn ids(&self) -> &[String] {
        &self.matrix.example_ids
    }

    pub fn to_jsonl(&self) -> String {
        let m = &self.matrix;
        let header = Header {
            format_version: CACHE_FORMAT_VERSION,
            dataset: self.dataset.clone(),
            scorers: m.scorers.clone(),
            examples: m.n_rows(),
            total_llm_calls: self.total_llm_calls,
            generations: self.generations,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for (r, id) in m.example_ids.iter().enumerate() {
            let errors = m
                .errors
                .range((r, 0)..(r + 1, 0))
                .map(|((_, c), e)| (m.scorers[*c].to_string(), e.clone()))
                .collect();
            let line = Line {
                id: id.clone(),
                label: self.labels[r],
                values: (0..m.n_cols()).map(|c| m.get(r, c)).collect(),
                errors,
                embedding: self.embeddings.get(id).cloned(),
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&line).expect("line serializes"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_jsonl())
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or("empty score cache")?;
        let header: Header = serde_json::from_str(first).map_err(|e| format!("line 1: {e}"))?;
        if header.format_version != CACHE_FORMAT_VERSION {
            return Err(format!("unsupported cache format {}", header.format_version));
        }
        let mut parsed = Vec::with_capacity(header.examples);
        for (i, l) in lines {
            let line: Line = serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1))?;
            if line.values.len() != header.scorers.len() {
                return Err(format!("line {}: expected {} values", i + 1, header.scorers.len()));
            }
            parsed.push(line);
        }
        if parsed.len() != header.examples {
            return Err(format!("header lists {} examples, found {}", header.examples, parsed.len()));
        }
        let ids: Vec<String> = parsed.iter().map(|l| l.id.clone()).collect();
        let mut matrix = ScoreMatrix::new(ids, header.scorers.clone());
        let mut labels = Vec::with_capacity(parsed.len());
        let mut embeddings = BTreeMap::new();
        for (r, line) in parsed.into_iter().enumerate() {
            for (c, v) in line.values.iter().enumerate() {
                if let Some(v) = *v {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(format!("{}: score {v} outside [0,1]", line.id));
                    }
                    matrix.set(r, c, v);
                }
            }
            for (name, e) in line.errors {
                let kind: ScorerKind = name.parse()?;
                let c = matrix.col_of(&kind).ok_or_else(|| format!("{}: unknown scorer {name}", line.id))?;
                matrix.errors.insert((r, c), e);
            }
            if let Some(e) = line.embedding {
                embeddings.insert(line.id.clone(), e);
            }
            labels.push(line.label);
        }
        Ok(Self {
            dataset: header.dataset,
            labels,
            matrix,
            embeddings,
            total_llm_calls: header.total_llm_calls,
            generations: header.generations,
        })
    }

    pub fn read(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut m = ScoreMatrix::new(vec!["a".into(), "b".into()], vec![ScorerKind::PTrue, ScorerKind::SelfCheckNli(2)]);
        m.set(0, 0, 0.25);
        m.set(1, 1, 1.0);
        m.errors.insert((0, 1), "fixture miss".into());
        let c = ScoreCache {
            dataset: "d".into(),
            labels: vec![Some(1), None],
            matrix: m,
            embeddings: [("b".to_string(), vec![0.5, -0.125])].into(),
            total_llm_calls: 3,
            generations: 2,
        };
        let text = c.to_jsonl();
        assert_eq!(ScoreCache::parse(&text).unwrap(), c);
        assert!(ScoreCache::parse(&text.replace("0.25", "1.5")).is_err());
    }
}
