//! Metrics, thresholds and report generation.

mod metrics;
pub mod report;

pub use metrics::{
    average_ranks, brier, classify, f1_accuracy, spearman, threshold_at_percentile, LossKind,
};
pub use report::{build_report, BudgetPoint, BudgetRow, EvaluationReport, MetricRow, PredictionSet, ReportError, ReportInputs, MULTI_SCORE};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("percentile {0} outside [0,100]")]
    BadPercentile(f64),
    #[error("rank correlation undefined for constant input")]
    ConstantInput,
}
