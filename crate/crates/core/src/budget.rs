//! LLM-call cost model and budget-constrained selection of score subsets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{fit_logistic_regression, predict_multiscore, AggregationError, FeatureMatrix, FitOptions, LogisticModel};
use crate::evaluation::{LossKind, MetricError};
use crate::exec::Execution;
use crate::scorers::ScorerKind;

/// Largest scorer count searched exhaustively.
pub const MAX_EXHAUSTIVE: usize = 20;
/// Share of the calibration fold used for fitting inside subset selection.
pub const INNER_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BudgetError {
    #[error("scorer {0} has no cost entry")]
    UnknownScorer(ScorerKind),
    #[error("no scorer subset fits budget {budget} (cheapest scorer costs {cheapest})")]
    NoAffordableSubset { budget: u32, cheapest: u32 },
    #[error("{0} scorers exceed the exhaustive-search limit of {MAX_EXHAUSTIVE}")]
    TooMany(usize),
    #[error("{rows} feature rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("inner training split has a single class")]
    SingleClassSplit,
    #[error("fit failed: {0}")]
    Fit(#[from] AggregationError),
    #[error("loss failed: {0}")]
    Loss(#[from] MetricError),
    #[error("budget {budget}: {source}")]
    AtBudget { budget: u32, source: Box<BudgetError> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SharingMode {
    #[default]
    Additive,
    /// Sampled generations are produced once at the largest K and shared by
    /// every multi-generation scorer.
    SharedGenerations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub llm_calls: u32,
    pub nli_calls: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub entries: BTreeMap<ScorerKind, CostEntry>,
    pub sharing_mode: SharingMode,
}

impl CostModel {
    /// Default per-example call counts for each kind.
    pub fn standard(kinds: &[ScorerKind], sharing_mode: SharingMode) -> Self {
        let entries = kinds
            .iter()
            .map(|&k| {
                (
                    k,
                    CostEntry {
                        llm_calls: k.llm_calls(),
                        nli_calls: k.nli_calls(),
                    },
                )
            })
            .collect();
        Self { entries, sharing_mode }
    }

    pub fn cost(&self, kind: ScorerKind) -> Result<u32, BudgetError> {
        self.entries.get(&kind).map(|e| e.llm_calls).ok_or(BudgetError::UnknownScorer(kind))
    }

    pub fn total_cost(&self) -> u32 {
        let kinds: Vec<ScorerKind> = self.entries.keys().copied().collect();
        subset_cost(&kinds, self).expect("all kinds have entries")
    }
}

/// LLM calls per example for a set of scorers.
pub fn subset_cost(kinds: &[ScorerKind], cm: &CostModel) -> Result<u32, BudgetError> {
    let mut total = 0;
    let mut shared_k = 0;
    for &k in kinds {
        let c = cm.cost(k)?;
        match cm.sharing_mode {
            SharingMode::SharedGenerations if k.is_multi_generation() => {
                let g = k.generations().min(c);
                shared_k = shared_k.max(g);
                total += c - g;
            }
            _ => total += c,
        }
    }
    Ok(total + shared_k)
}

/// Seeded 80/20 partition of `0..n` into (train, validation), each sorted.
pub fn inner_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * INNER_TRAIN_FRACTION).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSelection {
    pub budget: u32,
    pub selected: Vec<ScorerKind>,
    /// Column indices of `selected` in the input feature matrix.
    pub columns: Vec<usize>,
    pub cost: u32,
    pub validation_loss: f64,
    pub model: LogisticModel,
    /// Number of affordable subsets fitted and scored.
    pub evaluated: usize,
}

/// Loss, inner-split seed, optimizer settings and execution mode for selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub loss: LossKind,
    pub inner_split_seed: u64,
    pub fit: FitOptions,
    pub exec: Execution,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            loss: LossKind::Brier,
            inner_split_seed: 0,
            fit: FitOptions::default(),
            exec: Execution::Parallel,
        }
    }
}

impl SelectionParams {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            inner_split_seed: seed,
            ..Self::default()
        }
    }
}

/// Precomputed inner split shared by every subset evaluation.
struct InnerData {
    train: FeatureMatrix,
    y_train: Vec<u8>,
    val: FeatureMatrix,
    y_val: Vec<u8>,
}

impl InnerData {
    fn new(x: &FeatureMatrix, y: &[u8], seed: u64) -> Result<Self, BudgetError> {
        if x.n_rows() != y.len() {
            return Err(BudgetError::LengthMismatch {
                rows: x.n_rows(),
                labels: y.len(),
            });
        }
        let (tr, va) = inner_split(y.len(), seed);
        let y_train: Vec<u8> = tr.iter().map(|&i| y[i]).collect();
        if y_train.iter().all(|&v| v == y_train[0]) || va.is_empty() {
            return Err(BudgetError::SingleClassSplit);
        }
        Ok(Self {
            train: x.select_rows(&tr),
            y_train,
            val: x.select_rows(&va),
            y_val: va.iter().map(|&i| y[i]).collect(),
        })
    }

    fn evaluate(&self, cols: &[usize], loss: LossKind, fit: FitOptions) -> Result<(f64, LogisticModel), BudgetError> {
        let train = self.train.select_columns(cols);
        let model = fit_logistic_regression(&train, &self.y_train, fit)?;
        let val_preds = predict_multiscore(&model, &self.val.select_columns(cols))?;
        let reference = if loss == LossKind::Brier {
            Vec::new()
        } else {
            predict_multiscore(&model, &train)?
        };
        Ok((loss.evaluate(&val_preds, &self.y_val, &reference)?, model))
    }
}

/// Inner-validation loss of one column subset, as used by the selection.
pub fn subset_validation_loss(x: &FeatureMatrix, y: &[u8], cols: &[usize], params: &SelectionParams) -> Result<f64, BudgetError> {
    Ok(InnerData::new(x, y, params.inner_split_seed)?.evaluate(cols, params.loss, params.fit)?.0)
}

fn mask_columns(mask: u32, n: usize) -> Vec<usize> {
    (0..n).filter(|j| mask & (1 << j) != 0).collect()
}

fn affordable_masks(x: &FeatureMatrix, cm: &CostModel, budget: u32) -> Result<Vec<(u32, u32)>, BudgetError> {
    let n = x.n_cols();
    if n > MAX_EXHAUSTIVE {
        return Err(BudgetError::TooMany(n));
    }
    let costs: Vec<u32> = x.columns.iter().map(|&k| cm.cost(k)).collect::<Result<_, _>>()?;
    let cheapest = costs.iter().copied().min().unwrap_or(0);
    let mut out = Vec::new();
    for mask in 1u32..(1u32 << n) {
        let kinds: Vec<ScorerKind> = mask_columns(mask, n).iter().map(|&j| x.columns[j]).collect();
        let cost = subset_cost(&kinds, cm)?;
        if cost <= budget {
            out.push((mask, cost));
        }
    }
    if out.is_empty() {
        return Err(BudgetError::NoAffordableSubset { budget, cheapest });
    }
    Ok(out)
}

/// Exhaustively fits every non-empty subset within `budget` on an inner
/// 80/20 split and returns the one with the lowest validation loss. Ties go
/// to the lower cost, then to the lexicographically smaller column list.
pub fn select_cost_effective(
    x: &FeatureMatrix,
    y: &[u8],
    cm: &CostModel,
    budget: u32,
    params: &SelectionParams,
) -> Result<SubsetSelection, BudgetError> {
    let candidates = affordable_masks(x, cm, budget)?;
    let data = InnerData::new(x, y, params.inner_split_seed)?;
    let results = params.exec.map(&candidates, |&(mask, cost)| {
        let cols = mask_columns(mask, x.n_cols());
        data.evaluate(&cols, params.loss, params.fit).map(|(l, m)| (l, cost, cols, m))
    });
    let mut best: Option<(f64, u32, Vec<usize>, LogisticModel)> = None;
    for r in results {
        let cand = r?;
        let better = match &best {
            None => true,
            Some(b) => cand.0.total_cmp(&b.0).then(cand.1.cmp(&b.1)).then_with(|| cand.2.cmp(&b.2)).is_lt(),
        };
        if better {
            best = Some(cand);
        }
    }
    let (validation_loss, cost, columns, model) = best.expect("at least one candidate");
    Ok(SubsetSelection {
        budget,
        selected: columns.iter().map(|&j| x.columns[j]).collect(),
        columns,
        cost,
        validation_loss,
        model,
        evaluated: candidates.len(),
    })
}

/// One selection per budget.
pub fn budget_curve(
    x: &FeatureMatrix,
    y: &[u8],
    cm: &CostModel,
    budgets: &[u32],
    params: &SelectionParams,
) -> Result<Vec<SubsetSelection>, BudgetError> {
    budgets
        .iter()
        .map(|&b| {
            select_cost_effective(x, y, cm, b, params).map_err(|e| BudgetError::AtBudget {
                budget: b,
                source: Box::new(e),
            })
        })
        .collect()
}
