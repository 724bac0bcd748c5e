use serde::{Deserialize, Serialize};

use super::MetricError;

fn check_lengths(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Mean squared difference between predicted probability and label.
pub fn brier(preds: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_lengths(preds.len(), labels.len())?;
    let sum: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, &y)| (p - f64::from(y)).powi(2))
        .sum();
    Ok(sum / preds.len() as f64)
}

/// Nearest-rank percentile: the ⌈p/100 · n⌉-th order statistic (at least the first).
pub fn threshold_at_percentile(scores: &[f64], percentile: f64) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(MetricError::BadPercentile(percentile));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Predict permissible (1) iff the score reaches the threshold.
pub fn classify(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= threshold)).collect()
}

/// F1 with permissible (1) as the positive class, and accuracy. F1 is 0
/// when precision or recall is undefined.
pub fn f1_accuracy(preds: &[u8], labels: &[u8]) -> Result<(f64, f64), MetricError> {
    check_lengths(preds.len(), labels.len())?;
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fneg += 1,
            _ => {}
        }
        if p == y {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / preds.len() as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    Ok((f1, accuracy))
}

/// 1-based fractional ranks; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricError::Empty);
    }
    pearson(&average_ranks(a), &average_ranks(b)).ok_or(MetricError::ConstantInput)
}

/// Selection loss; lower is better for every kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Brier,
    /// Negative F1 at the median of the reference predictions.
    #[serde(rename = "f1")]
    NegF1AtMedian,
    #[serde(rename = "acc")]
    NegAccuracy,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "brier" => Ok(Self::Brier),
            "f1" => Ok(Self::NegF1AtMedian),
            "acc" => Ok(Self::NegAccuracy),
            other => Err(format!("unknown loss {other:?} (expected brier|f1|acc)")),
        }
    }
}

impl LossKind {
    /// Evaluates the loss on `preds`. Threshold-based kinds take their
    /// threshold as the median of `reference` (the fitting-set predictions).
    pub fn evaluate(self, preds: &[f64], labels: &[u8], reference: &[f64]) -> Result<f64, MetricError> {
        match self {
            LossKind::Brier => brier(preds, labels),
            LossKind::NegF1AtMedian | LossKind::NegAccuracy => {
                let t = threshold_at_percentile(reference, 50.0)?;
                let (f1, acc) = f1_accuracy(&classify(preds, t), labels)?;
                Ok(if self == LossKind::NegF1AtMedian { -f1 } else { -acc })
            }
        }
    }
}
