//! Declarative run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{DEFAULT_EPSILON, DEFAULT_L2};
use crate::backends::BackendMode;
use crate::budget::SharingMode;
use crate::calibration::{CalibrationConfig, GroupingConfig};
use crate::evaluation::LossKind;
use crate::scorers::{ScorerKind, ScoringConfig};

/// Environment variables for endpoint base URLs and bearer tokens.
pub const ENV_CHAT_URL: &str = "HALLUDETECT_CHAT_URL";
pub const ENV_NLI_URL: &str = "HALLUDETECT_NLI_URL";
pub const ENV_EMBEDDINGS_URL: &str = "HALLUDETECT_EMBEDDINGS_URL";
pub const ENV_CHAT_TOKEN: &str = "HALLUDETECT_CHAT_TOKEN";
pub const ENV_NLI_TOKEN: &str = "HALLUDETECT_NLI_TOKEN";
pub const ENV_EMBEDDINGS_TOKEN: &str = "HALLUDETECT_EMBEDDINGS_TOKEN";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{path}: invalid value at `{key}`: {message}")]
    Invalid { path: PathBuf, key: String, message: String },
    #[error("{0}")]
    Rule(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub scorers: Vec<ScorerKind>,
    #[serde(default = "default_fraction")]
    pub calib_fraction: f64,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub grouping: GroupingConfig,
    #[serde(default)]
    pub aggregation: AggregationSettings,
    #[serde(default)]
    pub budget: BudgetSettings,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub fixtures: Option<PathBuf>,
    pub chat_url: Option<String>,
    pub nli_url: Option<String>,
    pub embeddings_url: Option<String>,
    pub embedding_model: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Live,
            fixtures: None,
            chat_url: None,
            nli_url: None,
            embeddings_url: None,
            embedding_model: "embedder".into(),
            timeout_secs: 120,
            max_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMethod {
    #[default]
    Multical,
    Platt,
    Histogram,
    /// Zero-patch calibrators that pass scores through.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    pub method: CalibrationMethod,
    pub bins: usize,
    pub alpha: f64,
    pub min_cell: usize,
    pub max_iters: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        let c = CalibrationConfig::default();
        Self {
            method: CalibrationMethod::default(),
            bins: c.bins,
            alpha: c.alpha,
            min_cell: c.min_cell,
            max_iters: c.max_iters,
        }
    }
}

impl CalibrationSettings {
    pub fn config(&self) -> CalibrationConfig {
        CalibrationConfig {
            bins: self.bins,
            alpha: self.alpha,
            min_cell: self.min_cell,
            max_iters: self.max_iters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationSettings {
    pub l2_lambda: f64,
    pub epsilon: f64,
    /// Fit the multi-score and budget selections on uncalibrated scores.
    pub raw_scores: bool,
}

impl Default for AggregationSettings {
    fn default() -> Self {
        Self {
            l2_lambda: DEFAULT_L2,
            epsilon: DEFAULT_EPSILON,
            raw_scores: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSettings {
    /// Budgets in LLM calls per example; empty means every distinct
    /// single-scorer cost plus the total cost.
    pub budgets: Vec<u32>,
    pub loss: LossKind,
    pub sharing_mode: SharingMode,
}

impl RunConfig {
    /// Parses TOML. Errors name the offending key path.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let invalid = |key: String, message: String| ConfigError::Invalid {
            path: origin.to_path_buf(),
            key,
            message,
        };
        let de = toml::Deserializer::parse(text).map_err(|e| invalid(".".into(), e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            invalid(key, e.into_inner().message().to_string())
        })?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.out = base.join(&cfg.out);
        if let Some(f) = &cfg.backend.fixtures {
            cfg.backend.fixtures = Some(base.join(f));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scorers.is_empty() {
            return Err(ConfigError::Rule("scorers: at least one scorer is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for k in &self.scorers {
            if !seen.insert(k) {
                return Err(ConfigError::Rule(format!("scorers: {k} listed twice")));
            }
        }
        if matches!(self.backend.mode, BackendMode::Replay | BackendMode::Record) && self.backend.fixtures.is_none() {
            return Err(ConfigError::Rule(format!("backend.fixtures is required in {:?} mode", self.backend.mode).to_lowercase()));
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction < 1.0) {
            return Err(ConfigError::Rule(format!("calib_fraction = {} must lie in (0, 1)", self.calib_fraction)));
        }
        self.calibration.config().validate().map_err(|e| ConfigError::Rule(format!("calibration: {e}")))?;
        if self.scoring.top_logprobs > crate::backends::MAX_TOP_LOGPROBS {
            return Err(ConfigError::Rule("scoring.top_logprobs exceeds 20".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
dataset = "data.jsonl"
scorers = ["PTrue", "SelfCheckNli(3)"]

[backend]
mode = "replay"
fixtures = "fx.jsonl"
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_toml(MINIMAL, Path::new("run.toml")).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.scorers[1], ScorerKind::SelfCheckNli(3));
        assert_eq!(c.calibration.bins, 10);
        assert_eq!(c.budget.loss, LossKind::Brier);
        assert_eq!(c.out, PathBuf::from("out"));
        c.validate().unwrap();
    }

    #[test]
    fn errors_name_the_key() {
        let bad = MINIMAL.replace("mode = \"replay\"", "mode = \"replay\"\ntimeout_secs = \"soon\"");
        let e = RunConfig::from_toml(&bad, Path::new("run.toml")).unwrap_err();
        assert!(matches!(&e, ConfigError::Invalid { key, .. } if key == "backend.timeout_secs"), "{e}");
        let bad = MINIMAL.replace("\"PTrue\"", "\"Nope\"");
        let e = RunConfig::from_toml(&bad, Path::new("run.toml")).unwrap_err();
        assert!(matches!(&e, ConfigError::Invalid { key, .. } if key.starts_with("scorers")), "{e}");
    }

    #[test]
    fn seed_is_mandatory() {
        let e = RunConfig::from_toml(&MINIMAL.replace("seed = 3", ""), Path::new("run.toml")).unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn replay_needs_fixtures() {
        let c = RunConfig::from_toml(&MINIMAL.replace("fixtures = \"fx.jsonl\"", ""), Path::new("run.toml")).unwrap();
        assert!(c.validate().is_err());
    }
}
