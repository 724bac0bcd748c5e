//! Test-fold report: metric rows, rank correlations and the budget curve.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{brier, classify, f1_accuracy, spearman, threshold_at_percentile, LossKind, MetricError};
use crate::model::SplitAssignment;
use crate::scorers::ScorerKind;

pub const MULTI_SCORE: &str = "Multi-Score";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CORRELATIONS_FILE: &str = "correlations.csv";
pub const BUDGET_FILE: &str = "budget_curve.csv";
pub const SUMMARY_FILE: &str = "report.json";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{count} test-fold examples have no label (first: {first})")]
    MissingLabels { count: usize, first: String },
    #[error("fold leakage: test example {0} was used for fitting")]
    FoldLeakage(String),
    #[error("{0}: no predictions on the calibration fold to derive a threshold")]
    NoThreshold(String),
    #[error("{0}: no predictions on the test fold")]
    NoTestPredictions(String),
    #[error("{name}: {source}")]
    Metric { name: String, source: MetricError },
    #[error("{0} predictions for {1} examples")]
    Misaligned(usize, usize),
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
}

/// Predicted probabilities for every example (aligned with
/// `ReportInputs::example_ids`), `None` where unavailable.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub name: String,
    pub cost: u32,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPoint {
    pub budget: u32,
    pub selected: Vec<ScorerKind>,
    pub cost: u32,
    pub validation_loss: f64,
    pub predictions: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportInputs {
    pub example_ids: Vec<String>,
    pub labels: Vec<Option<u8>>,
    pub split: SplitAssignment,
    /// Calibrated single scores, one set per configured scorer.
    pub scorers: Vec<PredictionSet>,
    pub multiscore: PredictionSet,
    pub multiscore_validation_loss: f64,
    pub budgets: Vec<BudgetPoint>,
    pub loss: LossKind,
    /// Every example id read by any fitting step.
    pub fitted_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scorer: String,
    pub brier: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub cost: u32,
    pub threshold: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget: u32,
    pub selected: Vec<ScorerKind>,
    pub cost: u32,
    pub validation_loss: f64,
    pub test_brier: f64,
    pub test_f1: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split_id: String,
    pub n_calibration: usize,
    pub n_test: usize,
    pub loss: LossKind,
    pub rows: Vec<MetricRow>,
    pub multiscore_validation_loss: f64,
    pub correlation_names: Vec<String>,
    /// Spearman ρ on the test fold; `None` where undefined (constant scores).
    pub correlations: Vec<Vec<Option<f64>>>,
    pub budget_rows: Vec<BudgetRow>,
}

struct Folds {
    cal: Vec<usize>,
    test: Vec<usize>,
    test_labels: Vec<u8>,
}

fn folds(inputs: &ReportInputs) -> Result<Folds, ReportError> {
    let n = inputs.example_ids.len();
    if inputs.labels.len() != n {
        return Err(ReportError::Misaligned(inputs.labels.len(), n));
    }
    if let Some(id) = inputs.fitted_ids.iter().find(|id| inputs.split.test_ids.contains(*id)) {
        return Err(ReportError::FoldLeakage(id.clone()));
    }
    let (mut cal, mut test) = (Vec::new(), Vec::new());
    for (i, id) in inputs.example_ids.iter().enumerate() {
        if inputs.split.test_ids.contains(id) {
            test.push(i);
        } else if inputs.split.calibration_ids.contains(id) {
            cal.push(i);
        }
    }
    let unlabeled: Vec<usize> = test.iter().copied().filter(|&i| inputs.labels[i].is_none()).collect();
    if let Some(&first) = unlabeled.first() {
        return Err(ReportError::MissingLabels {
            count: unlabeled.len(),
            first: inputs.example_ids[first].clone(),
        });
    }
    let test_labels = test.iter().map(|&i| inputs.labels[i].expect("checked")).collect();
    Ok(Folds { cal, test, test_labels })
}

/// (brier, f1, accuracy, threshold, n) on the test rows holding a prediction,
/// thresholded at the median of the calibration-fold predictions.
fn score_on_test(name: &str, values: &[Option<f64>], f: &Folds) -> Result<(f64, f64, f64, f64, usize), ReportError> {
    let metric = |source| ReportError::Metric {
        name: name.to_string(),
        source,
    };
    let cal: Vec<f64> = f.cal.iter().filter_map(|&i| values[i]).collect();
    if cal.is_empty() {
        return Err(ReportError::NoThreshold(name.to_string()));
    }
    let threshold = threshold_at_percentile(&cal, 50.0).map_err(metric)?;
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for (&i, &y) in f.test.iter().zip(&f.test_labels) {
        if let Some(p) = values[i] {
            preds.push(p);
            labels.push(y);
        }
    }
    if preds.is_empty() {
        return Err(ReportError::NoTestPredictions(name.to_string()));
    }
    let b = brier(&preds, &labels).map_err(metric)?;
    let (f1, acc) = f1_accuracy(&classify(&preds, threshold), &labels).map_err(metric)?;
    Ok((b, f1, acc, threshold, preds.len()))
}

fn check_aligned(values: &[Option<f64>], n: usize) -> Result<(), ReportError> {
    if values.len() != n {
        return Err(ReportError::Misaligned(values.len(), n));
    }
    Ok(())
}

/// Assembles the report from test-fold predictions only; thresholds and the
/// fitted models come from the calibration fold.
pub fn build_report(inputs: &ReportInputs) -> Result<EvaluationReport, ReportError> {
    let f = folds(inputs)?;
    let n = inputs.example_ids.len();
    let mut rows = Vec::new();
    for set in inputs.scorers.iter().chain([&inputs.multiscore]) {
        check_aligned(&set.values, n)?;
        let (brier, f1, accuracy, threshold, n_test) = score_on_test(&set.name, &set.values, &f)?;
        rows.push(MetricRow {
            scorer: set.name.clone(),
            brier,
            f1,
            accuracy,
            cost: set.cost,
            threshold,
            n_test,
        });
    }

    let names: Vec<String> = inputs.scorers.iter().map(|s| s.name.clone()).collect();
    let k = names.len();
    let mut correlations = vec![vec![None; k]; k];
    for a in 0..k {
        correlations[a][a] = Some(1.0);
        for b in a + 1..k {
            let (mut xa, mut xb) = (Vec::new(), Vec::new());
            for &i in &f.test {
                if let (Some(u), Some(v)) = (inputs.scorers[a].values[i], inputs.scorers[b].values[i]) {
                    xa.push(u);
                    xb.push(v);
                }
            }
            let rho = spearman(&xa, &xb).ok();
            correlations[a][b] = rho;
            correlations[b][a] = rho;
        }
    }

    let mut budget_rows = Vec::new();
    for p in &inputs.budgets {
        check_aligned(&p.predictions, n)?;
        let (test_brier, test_f1, test_accuracy, _, _) = score_on_test(&format!("budget {}", p.budget), &p.predictions, &f)?;
        budget_rows.push(BudgetRow {
            budget: p.budget,
            selected: p.selected.clone(),
            cost: p.cost,
            validation_loss: p.validation_loss,
            test_brier,
            test_f1,
            test_accuracy,
        });
    }

    Ok(EvaluationReport {
        split_id: inputs.split.split_id(),
        n_calibration: f.cal.len(),
        n_test: f.test.len(),
        loss: inputs.loss,
        rows,
        multiscore_validation_loss: inputs.multiscore_validation_loss,
        correlation_names: names,
        correlations,
        budget_rows,
    })
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

impl EvaluationReport {
    pub fn multiscore_row(&self) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.scorer == MULTI_SCORE)
    }

    pub fn row(&self, name: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.scorer == name)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("scorer,brier,f1,accuracy,cost\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.scorer, num(r.brier), num(r.f1), num(r.accuracy), r.cost);
        }
        s
    }

    pub fn correlations_csv(&self) -> String {
        let mut s = String::from("scorer");
        for n in &self.correlation_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (name, row) in self.correlation_names.iter().zip(&self.correlations) {
            s.push_str(name);
            for v in row {
                s.push(',');
                s.push_str(&v.map_or_else(|| "NaN".to_string(), num));
            }
            s.push('\n');
        }
        s
    }

    pub fn budget_csv(&self) -> String {
        let mut s = String::from("budget,selected,cost,validation_loss,test_brier,test_f1,test_accuracy\n");
        for r in &self.budget_rows {
            let selected: Vec<String> = r.selected.iter().map(ToString::to_string).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.budget,
                selected.join("+"),
                r.cost,
                num(r.validation_loss),
                num(r.test_brier),
                num(r.test_f1),
                num(r.test_accuracy)
            );
        }
        s
    }

    /// Writes the three CSV tables and a JSON summary into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<(), ReportError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(METRICS_FILE), self.metrics_csv())?;
        std::fs::write(dir.join(CORRELATIONS_FILE), self.correlations_csv())?;
        std::fs::write(dir.join(BUDGET_FILE), self.budget_csv())?;
        let mut json = serde_json::to_string_pretty(self).expect("report serializes");
        json.push('\n');
        std::fs::write(dir.join(SUMMARY_FILE), json)?;
        Ok(())
    }
}
