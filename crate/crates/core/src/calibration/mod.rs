//! Score calibration: histogram binning, Platt scaling and multicalibration
//! over overlapping input groups.

mod grouping;

pub use grouping::{
    build_groups, build_groups_from_embeddings, embed_dataset, GaussianMixture, Group, GroupOrigin, GroupSet,
    GroupingConfig, GroupingModel,
};

use serde::{Deserialize, Serialize};

use crate::aggregation::{fit_logistic_regression, logit_transform, sigmoid, FeatureMatrix, FitOptions, DEFAULT_EPSILON};
use crate::backends::BackendError;
use crate::scorers::ScorerKind;

pub const CALIBRATOR_FORMAT_VERSION: u32 = 1;

/// Group id of the always-present Global group.
pub const GLOBAL_GROUP: u32 = 0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("{0} scores but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no examples to calibrate")]
    Empty,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("score {0} is not a probability")]
    InvalidScore(f64),
    #[error("invalid calibration config: {0}")]
    BadConfig(String),
    #[error("calibration fold is empty")]
    EmptyFold,
    #[error("example {0} belongs to no group")]
    Uncovered(usize),
    #[error("calibrator references group {0} but no membership was supplied for it")]
    UnknownGroup(u32),
    #[error("embedding failed for {id}: {source}")]
    Embedding { id: String, source: BackendError },
    #[error("mixture fitting failed: {0}")]
    Mixture(String),
    #[error("platt fit failed: {0}")]
    Platt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub bins: usize,
    pub alpha: f64,
    pub min_cell: usize,
    pub max_iters: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            alpha: 0.02,
            min_cell: 20,
            max_iters: 1000,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.bins < 2 {
            return Err(CalibrationError::BadConfig(format!("bins = {} (need >= 2)", self.bins)));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(CalibrationError::BadConfig(format!("alpha = {} (need 0 < alpha < 0.5)", self.alpha)));
        }
        Ok(())
    }
}

/// Equal-width bin of a probability; 1.0 falls in the last bin.
pub fn bin_index(s: f64, bins: usize) -> usize {
    ((s * bins as f64).floor() as usize).min(bins - 1)
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<(), CalibrationError> {
    if scores.len() != labels.len() {
        return Err(CalibrationError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(CalibrationError::InvalidScore(s));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub bin: usize,
    pub count: usize,
    pub score_mean: f64,
    pub label_mean: f64,
    pub error: f64,
}

/// Largest |label mean − score mean| over bins holding at least `min_cell`
/// members (0 when none qualify), with the qualifying bins.
pub fn calibration_error(
    scores: &[f64],
    labels: &[u8],
    bins: usize,
    min_cell: usize,
) -> Result<(f64, Vec<BinReport>), CalibrationError> {
    check_scores(scores, labels)?;
    if bins == 0 {
        return Err(CalibrationError::BadConfig("bins = 0".into()));
    }
    let mut count = vec![0usize; bins];
    let mut sum_s = vec![0.0; bins];
    let mut sum_y = vec![0.0; bins];
    for (&s, &y) in scores.iter().zip(labels) {
        let b = bin_index(s, bins);
        count[b] += 1;
        sum_s[b] += s;
        sum_y[b] += f64::from(y);
    }
    let mut report = Vec::new();
    let mut max = 0.0f64;
    for b in 0..bins {
        if count[b] == 0 || count[b] < min_cell {
            continue;
        }
        let n = count[b] as f64;
        let error = (sum_y[b] / n - sum_s[b] / n).abs();
        max = max.max(error);
        report.push(BinReport {
            bin: b,
            count: count[b],
            score_mean: sum_s[b] / n,
            label_mean: sum_y[b] / n,
            error,
        });
    }
    Ok((max, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub group_id: u32,
    pub bin: usize,
    pub adjustment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum CalibratorKind {
    HistogramBinning { bins: usize, values: Vec<f64> },
    Platt { a: f64, b: f64 },
    Multical { patches: Vec<Patch>, bins: usize, alpha: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub n_examples: usize,
    pub iterations: usize,
    /// Multicalibration stopped at `max_iters` with cells still above alpha.
    pub hit_max_iters: bool,
    /// Calibration-fold Brier before patching and after each patch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub brier_history: Vec<f64>,
    pub final_max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub format_version: u32,
    pub kind: CalibratorKind,
    pub config: CalibrationConfig,
    pub scorer: Option<ScorerKind>,
    pub split_id: Option<String>,
    pub grouping: Option<GroupingModel>,
    pub fit: FitMetadata,
}

impl Calibrator {
    fn new(kind: CalibratorKind, config: CalibrationConfig, fit: FitMetadata) -> Self {
        Self {
            format_version: CALIBRATOR_FORMAT_VERSION,
            kind,
            config,
            scorer: None,
            split_id: None,
            grouping: None,
            fit,
        }
    }

    /// Multicalibrator with no patches, which returns scores unchanged.
    pub fn identity(config: CalibrationConfig) -> Self {
        Self::new(
            CalibratorKind::Multical {
                patches: Vec::new(),
                bins: config.bins,
                alpha: config.alpha,
            },
            config,
            FitMetadata::default(),
        )
    }

    pub fn fitted_on(mut self, scorer: ScorerKind, split_id: impl Into<String>) -> Self {
        self.scorer = Some(scorer);
        self.split_id = Some(split_id.into());
        self
    }

    pub fn with_grouping(mut self, model: Option<GroupingModel>) -> Self {
        self.grouping = model;
        self
    }

    pub fn patch_count(&self) -> usize {
        match &self.kind {
            CalibratorKind::Multical { patches, .. } => patches.len(),
            _ => 0,
        }
    }

    /// True when any patch targets a group other than Global.
    pub fn needs_membership(&self) -> bool {
        match &self.kind {
            CalibratorKind::Multical { patches, .. } => patches.iter().any(|p| p.group_id != GLOBAL_GROUP),
            _ => false,
        }
    }
}

/// Each bin maps to the label mean of its members; empty bins keep their midpoint.
pub fn fit_histogram_binning(scores: &[f64], labels: &[u8], bins: usize) -> Result<Calibrator, CalibrationError> {
    check_scores(scores, labels)?;
    let config = CalibrationConfig {
        bins,
        ..CalibrationConfig::default()
    };
    config.validate()?;
    let mut count = vec![0usize; bins];
    let mut sum_y = vec![0.0; bins];
    for (&s, &y) in scores.iter().zip(labels) {
        let b = bin_index(s, bins);
        count[b] += 1;
        sum_y[b] += f64::from(y);
    }
    let values = (0..bins)
        .map(|b| {
            if count[b] == 0 {
                (b as f64 + 0.5) / bins as f64
            } else {
                sum_y[b] / count[b] as f64
            }
        })
        .collect();
    let fit = FitMetadata {
        n_examples: scores.len(),
        ..FitMetadata::default()
    };
    Ok(Calibrator::new(CalibratorKind::HistogramBinning { bins, values }, config, fit))
}

/// σ(a·logit(s) + b), fitted by the regularized logistic-regression optimizer.
pub fn fit_platt(scores: &[f64], labels: &[u8]) -> Result<Calibrator, CalibrationError> {
    check_scores(scores, labels)?;
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(CalibrationError::SingleClass);
    }
    let logits = scores
        .iter()
        .map(|&s| logit_transform(s, DEFAULT_EPSILON))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CalibrationError::Platt(e.to_string()))?;
    let rows = (0..scores.len()).map(|i| i.to_string()).collect();
    let x = FeatureMatrix::new(rows, vec![ScorerKind::PTrue], logits).map_err(|e| CalibrationError::Platt(e.to_string()))?;
    let m = fit_logistic_regression(&x, labels, FitOptions::default()).map_err(|e| match e {
        crate::aggregation::AggregationError::SingleClass => CalibrationError::SingleClass,
        e => CalibrationError::Platt(e.to_string()),
    })?;
    let fit = FitMetadata {
        n_examples: scores.len(),
        iterations: m.iterations,
        ..FitMetadata::default()
    };
    Ok(Calibrator::new(
        CalibratorKind::Platt {
            a: m.weights[0],
            b: m.bias,
        },
        CalibrationConfig::default(),
        fit,
    ))
}

fn brier_of(values: &[f64], labels: &[u8]) -> f64 {
    values.iter().zip(labels).map(|(v, &y)| (v - f64::from(y)).powi(2)).sum::<f64>() / values.len() as f64
}

/// Sorted, deduplicated group ids per example.
pub type Membership = Vec<Vec<u32>>;

fn all_global(n: usize) -> Membership {
    vec![vec![GLOBAL_GROUP]; n]
}

/// Worst qualifying (group, bin) cell as (error, group, bin, adjustment).
fn worst_cell(values: &[f64], labels: &[u8], membership: &[Vec<u32>], groups: &[u32], cfg: &CalibrationConfig) -> Option<(f64, u32, usize, f64)> {
    let g_index = |g: u32| groups.binary_search(&g).expect("group id listed");
    let cells = groups.len() * cfg.bins;
    let mut count = vec![0usize; cells];
    let mut sum_s = vec![0.0; cells];
    let mut sum_y = vec![0.0; cells];
    for (i, gs) in membership.iter().enumerate() {
        let b = bin_index(values[i], cfg.bins);
        for &g in gs {
            let c = g_index(g) * cfg.bins + b;
            count[c] += 1;
            sum_s[c] += values[i];
            sum_y[c] += f64::from(labels[i]);
        }
    }
    let mut worst: Option<(f64, u32, usize, f64)> = None;
    for (gi, &g) in groups.iter().enumerate() {
        for b in 0..cfg.bins {
            let c = gi * cfg.bins + b;
            if count[c] == 0 || count[c] < cfg.min_cell {
                continue;
            }
            let n = count[c] as f64;
            let delta = sum_y[c] / n - sum_s[c] / n;
            // Strict comparison keeps the first (lowest group, then bin) on ties.
            if worst.is_none_or(|w| delta.abs() > w.0) {
                worst = Some((delta.abs(), g, b, delta));
            }
        }
    }
    worst
}

fn apply_patch(values: &mut [f64], membership: &[Vec<u32>], patch: &Patch, bins: usize) {
    for (v, gs) in values.iter_mut().zip(membership) {
        if gs.binary_search(&patch.group_id).is_ok() && bin_index(*v, bins) == patch.bin {
            *v = (*v + patch.adjustment).clamp(0.0, 1.0);
        }
    }
}

fn normalize_membership(membership: &[Vec<u32>]) -> Result<Membership, CalibrationError> {
    membership
        .iter()
        .enumerate()
        .map(|(i, gs)| {
            if gs.is_empty() {
                return Err(CalibrationError::Uncovered(i));
            }
            let mut gs = gs.clone();
            gs.sort_unstable();
            gs.dedup();
            Ok(gs)
        })
        .collect()
}

/// Iteratively patches the worst (group, bin) cell by its mean residual until
/// every cell with at least `min_cell` members is within `alpha`, or
/// `max_iters` patches have been applied. `membership` lists each example's
/// groups; `None` means the Global group only.
pub fn multicalibrate(
    scores: &[f64],
    labels: &[u8],
    membership: Option<&[Vec<u32>]>,
    cfg: &CalibrationConfig,
) -> Result<Calibrator, CalibrationError> {
    check_scores(scores, labels)?;
    cfg.validate()?;
    let membership = match membership {
        Some(m) if m.len() != scores.len() => return Err(CalibrationError::LengthMismatch(scores.len(), m.len())),
        Some(m) => normalize_membership(m)?,
        None => all_global(scores.len()),
    };
    let mut groups: Vec<u32> = membership.iter().flatten().copied().collect();
    groups.sort_unstable();
    groups.dedup();

    let mut values = scores.to_vec();
    let mut patches = Vec::new();
    let mut history = vec![brier_of(&values, labels)];
    let mut final_max_error;
    let mut hit_max_iters = false;
    loop {
        let worst = worst_cell(&values, labels, &membership, &groups, cfg);
        final_max_error = worst.map_or(0.0, |w| w.0);
        let Some((error, group_id, bin, adjustment)) = worst.filter(|w| w.0 > cfg.alpha) else {
            break;
        };
        if patches.len() >= cfg.max_iters {
            hit_max_iters = true;
            log::warn!("multicalibration stopped after {} patches with cell error {error:.4}", cfg.max_iters);
            break;
        }
        let patch = Patch {
            group_id,
            bin,
            adjustment,
        };
        apply_patch(&mut values, &membership, &patch, cfg.bins);
        patches.push(patch);
        history.push(brier_of(&values, labels));
    }
    let fit = FitMetadata {
        n_examples: scores.len(),
        iterations: patches.len(),
        hit_max_iters,
        brier_history: history,
        final_max_error,
    };
    Ok(Calibrator::new(
        CalibratorKind::Multical {
            patches,
            bins: cfg.bins,
            alpha: cfg.alpha,
        },
        *cfg,
        fit,
    ))
}

/// Maps scores through a fitted calibrator. Multicalibrators with non-Global
/// patches need each example's group membership.
pub fn apply_calibrator(c: &Calibrator, scores: &[f64], membership: Option<&[Vec<u32>]>) -> Result<Vec<f64>, CalibrationError> {
    if let Some(&s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(CalibrationError::InvalidScore(s));
    }
    match &c.kind {
        CalibratorKind::HistogramBinning { bins, values } => Ok(scores.iter().map(|&s| values[bin_index(s, *bins)].clamp(0.0, 1.0)).collect()),
        CalibratorKind::Platt { a, b } => scores
            .iter()
            .map(|&s| {
                let z = logit_transform(s, DEFAULT_EPSILON).map_err(|_| CalibrationError::InvalidScore(s))?;
                Ok(sigmoid(a * z + b))
            })
            .collect(),
        CalibratorKind::Multical { patches, bins, .. } => {
            let membership = match membership {
                Some(m) if m.len() != scores.len() => return Err(CalibrationError::LengthMismatch(scores.len(), m.len())),
                Some(m) => normalize_membership(m)?,
                None => {
                    if let Some(p) = patches.iter().find(|p| p.group_id != GLOBAL_GROUP) {
                        return Err(CalibrationError::UnknownGroup(p.group_id));
                    }
                    all_global(scores.len())
                }
            };
            let mut values = scores.to_vec();
            for p in patches {
                apply_patch(&mut values, &membership, p, *bins);
            }
            Ok(values)
        }
    }
}

#[cfg(test)]
mod tests;
