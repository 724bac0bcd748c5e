//! The three pipeline stages with file handoffs under the output directory:
//! `score` writes `scores.jsonl`, `calibrate` writes `calibrators/`, and
//! `evaluate` writes `report/`.

mod cache;
pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

pub use cache::ScoreCache;
pub use config::{CalibrationMethod, ConfigError, RunConfig};

use crate::aggregation::{fit_logistic_regression, predict_multiscore, AggregationError, FeatureMatrix, FitOptions};
use crate::backends::{
    sort_fixture_file, BackendError, BackendMode, Backends, EndpointConfig, HttpTransport, RecordingTransport, ReplayTransport, RetryPolicy,
    Transport,
};
use crate::budget::{budget_curve, subset_cost, subset_validation_loss, BudgetError, CostModel, SelectionParams};
use crate::calibration::{
    apply_calibrator, build_groups_from_embeddings, embed_dataset, fit_histogram_binning, fit_platt, multicalibrate, CalibrationError, Calibrator,
    GroupSet,
};
use crate::evaluation::{build_report, BudgetPoint, EvaluationReport, PredictionSet, ReportError, ReportInputs, MULTI_SCORE};
use crate::exec::Execution;
use crate::model::{load_dataset, split_ids, DataError, ScoreMatrix, SplitAssignment};
use crate::scorers::{score_all, ScoreError, ScorerKind};

pub const CACHE_FILE: &str = "scores.jsonl";
pub const CALIBRATOR_DIR: &str = "calibrators";
pub const GROUPS_FILE: &str = "groups.json";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Data(#[from] DataError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("scoring: {0}")]
    Score(#[from] ScoreError),
    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),
    #[error("aggregation: {0}")]
    Aggregation(#[from] AggregationError),
    #[error("budget selection: {0}")]
    Budget(#[from] BudgetError),
    #[error("report: {0}")]
    Report(#[from] ReportError),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("{count} {fold}-fold examples have no label (first: {first})")]
    MissingLabels { fold: &'static str, count: usize, first: String },
    #[error("stale artifact: {0}")]
    Stale(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// 1 for invalid input or configuration, 2 for backend failures, 3 for
    /// violated internal invariants.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Backend(_) | Self::Score(ScoreError::Backend(_) | ScoreError::ScorerFailed { .. }) => 2,
            Self::Calibration(CalibrationError::Embedding { .. }) => 2,
            Self::Report(ReportError::FoldLeakage(_)) => 3,
            _ => 1,
        }
    }
}

fn cache_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(CACHE_FILE)
}

fn calibrator_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(CALIBRATOR_DIR)
}

/// File name for a scorer's calibrator, e.g. `SelfCheckNli-3.json`.
pub fn calibrator_file(kind: ScorerKind) -> String {
    let name = kind.to_string().replace('(', "-").replace(')', "");
    format!("{name}.json")
}

fn env_or(var: &str, fallback: &Option<String>) -> Option<String> {
    std::env::var(var).ok().filter(|v| !v.is_empty()).or_else(|| fallback.clone())
}

fn http_transport(cfg: &RunConfig) -> Result<HttpTransport, PipelineError> {
    use config::*;
    let b = &cfg.backend;
    let endpoint = |url_var: &str, url: &Option<String>, token_var: &str, what: &str| {
        let base_url = env_or(url_var, url).ok_or_else(|| ConfigError::Rule(format!("no {what} URL: set backend.{what}_url or {url_var}")))?;
        Ok::<_, ConfigError>(EndpointConfig {
            base_url,
            bearer_token: std::env::var(token_var).ok().filter(|t| !t.is_empty()),
        })
    };
    let retry = RetryPolicy {
        max_attempts: b.max_attempts.max(1),
        ..RetryPolicy::default()
    };
    Ok(HttpTransport::new(
        endpoint(ENV_CHAT_URL, &b.chat_url, ENV_CHAT_TOKEN, "chat")?,
        endpoint(ENV_NLI_URL, &b.nli_url, ENV_NLI_TOKEN, "nli")?,
        endpoint(ENV_EMBEDDINGS_URL, &b.embeddings_url, ENV_EMBEDDINGS_TOKEN, "embeddings")?,
        retry,
        Duration::from_secs(b.timeout_secs),
    )?)
}

fn fixture_path(cfg: &RunConfig) -> Result<&Path, PipelineError> {
    cfg.backend
        .fixtures
        .as_deref()
        .ok_or_else(|| ConfigError::Rule("backend.fixtures is required".into()).into())
}

/// Transport for the configured mode.
pub fn make_transport(cfg: &RunConfig) -> Result<Arc<dyn Transport>, PipelineError> {
    Ok(match cfg.backend.mode {
        BackendMode::Replay => Arc::new(ReplayTransport::load(fixture_path(cfg)?)?),
        BackendMode::Live => Arc::new(http_transport(cfg)?),
        BackendMode::Record => Arc::new(RecordingTransport::create(Arc::new(http_transport(cfg)?), fixture_path(cfg)?)?),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    pub cache: PathBuf,
    pub examples: usize,
    /// (scorer, scored cells, failed cells).
    pub coverage: Vec<(ScorerKind, usize, usize)>,
    pub total_llm_calls: u64,
    pub warnings: Vec<String>,
}

/// Scores the dataset through the configured backend and writes the cache.
pub fn cmd_score(cfg: &RunConfig, exec: Execution) -> Result<ScoreSummary, PipelineError> {
    let transport = make_transport(cfg)?;
    let summary = cmd_score_with(cfg, transport, exec)?;
    if cfg.backend.mode == BackendMode::Record {
        sort_fixture_file(fixture_path(cfg)?)?;
    }
    Ok(summary)
}

/// [`cmd_score`] over an explicit transport.
pub fn cmd_score_with(cfg: &RunConfig, transport: Arc<dyn Transport>, exec: Execution) -> Result<ScoreSummary, PipelineError> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.dataset)?;
    let backends = Backends::new(transport, &cfg.backend.embedding_model);
    let run = score_all(&dataset, &cfg.scorers, &backends, &cfg.scoring, exec)?;
    let embeddings = if cfg.calibration.method == CalibrationMethod::Multical {
        exec.bounded(cfg.scoring.parallelism, || embed_dataset(&dataset, &backends.embed, exec))?
    } else {
        BTreeMap::new()
    };
    let m = &run.matrix;
    let coverage: Vec<(ScorerKind, usize, usize)> =
        m.scorers.iter().enumerate().map(|(c, &k)| (k, m.present_count(c), m.n_rows() - m.present_count(c))).collect();
    let warnings = m
        .errors
        .iter()
        .map(|((r, c), e)| format!("{} / {}: {e}", m.example_ids[*r], m.scorers[*c]))
        .collect();
    let cache = ScoreCache {
        dataset: dataset.name.clone(),
        labels: dataset.examples.iter().map(|e| e.label).collect(),
        matrix: run.matrix.clone(),
        embeddings,
        total_llm_calls: run.total_llm_calls(),
        generations: run.generations,
    };
    let path = cache_path(cfg);
    cache.write(&path)?;
    Ok(ScoreSummary {
        cache: path,
        examples: dataset.len(),
        coverage,
        total_llm_calls: run.total_llm_calls(),
        warnings,
    })
}

fn load_cache(cfg: &RunConfig) -> Result<ScoreCache, PipelineError> {
    let path = cache_path(cfg);
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(format!("{} (run `score` first)", path.display())));
    }
    ScoreCache::read(&path).map_err(PipelineError::MissingArtifact)
}

fn calibration_rows(cache: &ScoreCache, split: &SplitAssignment) -> Result<Vec<usize>, PipelineError> {
    let rows: Vec<usize> = (0..cache.ids().len()).filter(|&r| split.is_calibration(&cache.ids()[r])).collect();
    let unlabeled: Vec<usize> = rows.iter().copied().filter(|&r| cache.labels[r].is_none()).collect();
    if let Some(&first) = unlabeled.first() {
        return Err(PipelineError::MissingLabels {
            fold: "calibration",
            count: unlabeled.len(),
            first: cache.ids()[first].clone(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrateSummary {
    pub dir: PathBuf,
    /// (scorer, fitted examples, patches).
    pub fitted: Vec<(ScorerKind, usize, usize)>,
    pub groups: Option<usize>,
}

/// Fits one calibrator per scorer on the calibration fold.
pub fn cmd_calibrate(cfg: &RunConfig, no_calibration: bool) -> Result<CalibrateSummary, PipelineError> {
    cfg.validate()?;
    let cache = load_cache(cfg)?;
    let split = split_ids(cache.ids(), cfg.calib_fraction, cfg.seed)?;
    let rows = calibration_rows(&cache, &split)?;
    let method = if no_calibration { CalibrationMethod::None } else { cfg.calibration.method };
    let cal_cfg = cfg.calibration.config();

    let groups: Option<GroupSet> = if method == CalibrationMethod::Multical {
        if cache.embeddings.len() != cache.ids().len() {
            return Err(PipelineError::MissingArtifact("score cache has no embeddings; rescore with multical calibration".into()));
        }
        let grouping = crate::calibration::GroupingConfig {
            seed: cfg.seed,
            ..cfg.grouping
        };
        Some(build_groups_from_embeddings(cache.ids(), &cache.embeddings, &split, &grouping)?)
    } else {
        None
    };

    let dir = calibrator_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let mut fitted = Vec::new();
    for (c, &kind) in cache.matrix.scorers.iter().enumerate() {
        let present: Vec<usize> = rows.iter().copied().filter(|&r| cache.matrix.get(r, c).is_some()).collect();
        let scores: Vec<f64> = present.iter().map(|&r| cache.matrix.get(r, c).expect("present")).collect();
        let labels: Vec<u8> = present.iter().map(|&r| cache.labels[r].expect("labeled")).collect();
        let calibrator = match method {
            CalibrationMethod::None => Calibrator::identity(cal_cfg),
            CalibrationMethod::Histogram => fit_histogram_binning(&scores, &labels, cal_cfg.bins)?,
            CalibrationMethod::Platt => fit_platt(&scores, &labels)?,
            CalibrationMethod::Multical => {
                let g = groups.as_ref().expect("built above");
                let ids: Vec<String> = present.iter().map(|&r| cache.ids()[r].clone()).collect();
                let membership = g.membership(&ids);
                multicalibrate(&scores, &labels, Some(&membership), &cal_cfg)?.with_grouping(Some(g.model.clone()))
            }
        }
        .fitted_on(kind, split.split_id());
        if calibrator.fit.hit_max_iters {
            log::warn!("{kind}: multicalibration hit max_iters");
        }
        log::info!("{kind}: {} patches on {} examples", calibrator.patch_count(), scores.len());
        fitted.push((kind, scores.len(), calibrator.patch_count()));
        write_json(&dir.join(calibrator_file(kind)), &calibrator)?;
    }
    if let Some(g) = &groups {
        write_json(&dir.join(GROUPS_FILE), g)?;
    } else if dir.join(GROUPS_FILE).exists() {
        std::fs::remove_file(dir.join(GROUPS_FILE))?;
    }
    Ok(CalibrateSummary {
        dir,
        fitted,
        groups: groups.map(|g| g.groups.len()),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_calibrator(cfg: &RunConfig, kind: ScorerKind, split: &SplitAssignment) -> Result<Calibrator, PipelineError> {
    let path = calibrator_dir(cfg).join(calibrator_file(kind));
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::MissingArtifact(format!("{}: {e} (run `calibrate` first)", path.display())))?;
    let c: Calibrator = serde_json::from_str(&text).map_err(|e| PipelineError::MissingArtifact(format!("{}: {e}", path.display())))?;
    if c.scorer != Some(kind) {
        return Err(PipelineError::Stale(format!("{} was fitted for {:?}", path.display(), c.scorer)));
    }
    if c.split_id.as_deref() != Some(split.split_id().as_str()) {
        return Err(PipelineError::Stale(format!("{} was fitted on a different split; rerun `calibrate`", path.display())));
    }
    Ok(c)
}

/// Applies each scorer's calibrator to all of its present cells.
fn calibrated_matrix(cfg: &RunConfig, cache: &ScoreCache, split: &SplitAssignment) -> Result<ScoreMatrix, PipelineError> {
    let m = &cache.matrix;
    let mut out = ScoreMatrix::new(m.example_ids.clone(), m.scorers.clone());
    out.errors = m.errors.clone();
    for (c, &kind) in m.scorers.iter().enumerate() {
        let cal = load_calibrator(cfg, kind, split)?;
        let rows: Vec<usize> = (0..m.n_rows()).filter(|&r| m.get(r, c).is_some()).collect();
        let scores: Vec<f64> = rows.iter().map(|&r| m.get(r, c).expect("present")).collect();
        let membership = match (&cal.grouping, cal.needs_membership()) {
            (Some(model), true) => {
                let embeddings: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|&r| {
                        cache.embeddings.get(&m.example_ids[r]).cloned().ok_or_else(|| PipelineError::MissingArtifact(format!("embedding for {}", m.example_ids[r])))
                    })
                    .collect::<Result<_, _>>()?;
                Some(model.membership(&embeddings)?)
            }
            _ => None,
        };
        let values = apply_calibrator(&cal, &scores, membership.as_deref())?;
        for (&r, v) in rows.iter().zip(values) {
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// Budgets to sweep: configured ones, else each distinct single-scorer cost
/// and the total.
fn budgets_for(cfg: &RunConfig, cm: &CostModel) -> Result<Vec<u32>, PipelineError> {
    if !cfg.budget.budgets.is_empty() {
        return Ok(cfg.budget.budgets.clone());
    }
    let mut b: BTreeSet<u32> = cfg.scorers.iter().map(|&k| cm.cost(k)).collect::<Result<_, _>>()?;
    b.insert(subset_cost(&cfg.scorers, cm)?);
    Ok(b.into_iter().collect())
}

/// Calibrates, aggregates, sweeps budgets and writes the report files.
pub fn cmd_evaluate(cfg: &RunConfig, exec: Execution) -> Result<EvaluationReport, PipelineError> {
    cfg.validate()?;
    let cache = load_cache(cfg)?;
    let split = split_ids(cache.ids(), cfg.calib_fraction, cfg.seed)?;
    let cal_rows = calibration_rows(&cache, &split)?;
    let calibrated = calibrated_matrix(cfg, &cache, &split)?;
    let all_rows: Vec<usize> = (0..calibrated.n_rows()).collect();
    let eps = cfg.aggregation.epsilon;

    let features = if cfg.aggregation.raw_scores { &cache.matrix } else { &calibrated };
    let x_cal = FeatureMatrix::from_scores(features, &cal_rows, eps)?;
    let y_cal: Vec<u8> = cal_rows.iter().map(|&r| cache.labels[r].expect("labeled")).collect();
    let x_all = FeatureMatrix::from_scores(features, &all_rows, eps)?;
    let fit = FitOptions {
        l2_lambda: cfg.aggregation.l2_lambda,
        ..FitOptions::default()
    };
    let params = SelectionParams {
        loss: cfg.budget.loss,
        inner_split_seed: cfg.seed,
        fit,
        exec,
    };

    let full = fit_logistic_regression(&x_cal, &y_cal, fit)?;
    let multiscore = predict_multiscore(&full, &x_all)?;
    let all_cols: Vec<usize> = (0..x_cal.n_cols()).collect();
    let multiscore_validation_loss = subset_validation_loss(&x_cal, &y_cal, &all_cols, &params)?;

    let cm = CostModel::standard(&cfg.scorers, cfg.budget.sharing_mode);
    let budgets = budgets_for(cfg, &cm)?;
    let curve = budget_curve(&x_cal, &y_cal, &cm, &budgets, &params)?;
    let mut points = Vec::with_capacity(curve.len());
    for sel in &curve {
        // Test metrics use the selected subset refitted on the whole calibration fold.
        let model = fit_logistic_regression(&x_cal.select_columns(&sel.columns), &y_cal, fit)?;
        let preds = predict_multiscore(&model, &x_all.select_columns(&sel.columns))?;
        points.push(BudgetPoint {
            budget: sel.budget,
            selected: sel.selected.clone(),
            cost: sel.cost,
            validation_loss: sel.validation_loss,
            predictions: preds.into_iter().map(Some).collect(),
        });
    }

    let scorers = calibrated
        .scorers
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            Ok(PredictionSet {
                name: k.to_string(),
                cost: cm.cost(k)?,
                values: calibrated.column(c),
            })
        })
        .collect::<Result<Vec<_>, BudgetError>>()?;
    let inputs = ReportInputs {
        example_ids: cache.ids().to_vec(),
        labels: cache.labels.clone(),
        split,
        scorers,
        multiscore: PredictionSet {
            name: MULTI_SCORE.into(),
            cost: cm.total_cost(),
            values: multiscore.into_iter().map(Some).collect(),
        },
        multiscore_validation_loss,
        budgets: points,
        loss: cfg.budget.loss,
        fitted_ids: x_cal.rows.iter().cloned().collect(),
    };
    let report = build_report(&inputs)?;
    report.write_files(&cfg.out.join(REPORT_DIR))?;
    Ok(report)
}
