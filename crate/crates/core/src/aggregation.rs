//! Multi-scoring: an L2-regularized logistic regression over logit-transformed
//! scores.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::ScoreMatrix;
use crate::scorers::ScorerKind;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_L2: f64 = 1e-3;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregationError {
    #[error("score {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("{rows} feature rows but {labels} labels")]
    DimensionMismatch { rows: usize, labels: usize },
    #[error("feature columns {got:?} do not match model columns {expected:?}")]
    ColumnMismatch {
        expected: Vec<ScorerKind>,
        got: Vec<ScorerKind>,
    },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("no training rows")]
    Empty,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// ln(s'/(1-s')) with s' = clamp(s, epsilon, 1-epsilon).
pub fn logit_transform(s: f64, epsilon: f64) -> Result<f64, AggregationError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(AggregationError::OutOfRange(s));
    }
    let c = s.clamp(epsilon, 1.0 - epsilon);
    Ok((c / (1.0 - c)).ln())
}

/// Row-major logit features with the imputation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<ScorerKind>,
    values: Vec<f64>,
    pub imputed: Vec<bool>,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<String>, columns: Vec<ScorerKind>, values: Vec<f64>) -> Result<Self, AggregationError> {
        assert_eq!(values.len(), rows.len() * columns.len(), "feature grid size");
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AggregationError::NonFinite);
        }
        let imputed = vec![false; values.len()];
        Ok(Self {
            rows,
            columns,
            values,
            imputed,
        })
    }

    /// Logit features for the given matrix rows; missing cells become 0
    /// (probability 0.5) and are flagged in `imputed`.
    pub fn from_scores(m: &ScoreMatrix, row_indices: &[usize], epsilon: f64) -> Result<Self, AggregationError> {
        let mut values = Vec::with_capacity(row_indices.len() * m.n_cols());
        let mut imputed = Vec::with_capacity(values.capacity());
        for &r in row_indices {
            for c in 0..m.n_cols() {
                match m.get(r, c) {
                    Some(s) => {
                        values.push(logit_transform(s, epsilon)?);
                        imputed.push(false);
                    }
                    None => {
                        values.push(0.0);
                        imputed.push(true);
                    }
                }
            }
        }
        Ok(Self {
            rows: row_indices.iter().map(|&r| m.example_ids[r].clone()).collect(),
            columns: m.scorers.clone(),
            values,
            imputed,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_cols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols() + j]
    }

    /// Keeps the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let p = self.n_cols();
        let mut values = Vec::with_capacity(self.n_rows() * cols.len());
        let mut imputed = Vec::with_capacity(values.capacity());
        for i in 0..self.n_rows() {
            for &j in cols {
                values.push(self.values[i * p + j]);
                imputed.push(self.imputed[i * p + j]);
            }
        }
        Self {
            rows: self.rows.clone(),
            columns: cols.iter().map(|&j| self.columns[j]).collect(),
            values,
            imputed,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let p = self.n_cols();
        let mut values = Vec::with_capacity(rows.len() * p);
        let mut imputed = Vec::with_capacity(values.capacity());
        for &i in rows {
            values.extend_from_slice(&self.values[i * p..(i + 1) * p]);
            imputed.extend_from_slice(&self.imputed[i * p..(i + 1) * p]);
        }
        Self {
            rows: rows.iter().map(|&i| self.rows[i].clone()).collect(),
            columns: self.columns.clone(),
            values,
            imputed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub format_version: u32,
    pub columns: Vec<ScorerKind>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_lambda: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticModel {
    pub fn decision(&self, features: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub l2_lambda: f64,
    pub max_iter: usize,
    /// Convergence when the gradient max-norm falls to this value.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            l2_lambda: DEFAULT_L2,
            max_iter: 10_000,
            tol: 1e-8,
        }
    }
}

/// Mean negative log-likelihood plus (λ/2)·‖w‖², with its gradient in
/// (weights, bias). The bias is not penalized.
pub fn loss_and_gradient(x: &FeatureMatrix, y: &[u8], weights: &[f64], bias: f64, l2_lambda: f64) -> (f64, Vec<f64>, f64) {
    let n = x.n_rows() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for i in 0..x.n_rows() {
        let row = x.row(i);
        let z = bias + weights.iter().zip(row).map(|(w, v)| w * v).sum::<f64>();
        let yi = f64::from(y[i]);
        loss += softplus(z) - yi * z;
        let r = sigmoid(z) - yi;
        for (g, v) in grad.iter_mut().zip(row) {
            *g += r * v;
        }
        grad_b += r;
    }
    loss /= n;
    grad_b /= n;
    for (g, w) in grad.iter_mut().zip(weights) {
        *g = *g / n + l2_lambda * w;
    }
    loss += 0.5 * l2_lambda * weights.iter().map(|w| w * w).sum::<f64>();
    (loss, grad, grad_b)
}

fn max_abs(grad: &[f64], grad_b: f64) -> f64 {
    grad.iter().fold(grad_b.abs(), |m, g| m.max(g.abs()))
}

fn check_inputs(x: &FeatureMatrix, y: &[u8]) -> Result<(), AggregationError> {
    if x.n_rows() != y.len() {
        return Err(AggregationError::DimensionMismatch {
            rows: x.n_rows(),
            labels: y.len(),
        });
    }
    if y.is_empty() {
        return Err(AggregationError::Empty);
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(AggregationError::SingleClass);
    }
    if x.values.iter().any(|v| !v.is_finite()) {
        return Err(AggregationError::NonFinite);
    }
    Ok(())
}

/// Newton step direction (Hessian solve). `None` when the Hessian is not
/// positive definite.
fn newton_direction(x: &FeatureMatrix, weights: &[f64], bias: f64, l2: f64, grad: &[f64], grad_b: f64) -> Option<Vec<f64>> {
    let p = weights.len();
    let n = x.n_rows() as f64;
    let mut h = DMatrix::<f64>::zeros(p + 1, p + 1);
    for i in 0..x.n_rows() {
        let row = x.row(i);
        let z = bias + weights.iter().zip(row).map(|(w, v)| w * v).sum::<f64>();
        let s = sigmoid(z);
        let wgt = s * (1.0 - s);
        for a in 0..=p {
            let xa = if a < p { row[a] } else { 1.0 };
            for b in 0..=a {
                let xb = if b < p { row[b] } else { 1.0 };
                h[(a, b)] += wgt * xa * xb;
            }
        }
    }
    for a in 0..=p {
        for b in 0..=a {
            h[(a, b)] /= n;
            h[(b, a)] = h[(a, b)];
        }
        if a < p {
            h[(a, a)] += l2;
        }
    }
    let g = DVector::from_iterator(p + 1, grad.iter().copied().chain(std::iter::once(grad_b)));
    let chol = h.cholesky()?;
    let step = chol.solve(&g);
    if step.iter().all(|v| v.is_finite()) {
        Some(step.iter().map(|v| -v).collect())
    } else {
        None
    }
}

/// Fits by damped Newton iterations (IRLS), falling back to gradient descent
/// whenever the Hessian cannot be factored. Starts from zero, so the result
/// is deterministic.
pub fn fit_logistic_regression(x: &FeatureMatrix, y: &[u8], opts: FitOptions) -> Result<LogisticModel, AggregationError> {
    check_inputs(x, y)?;
    let p = x.n_cols();
    let mut w = vec![0.0; p];
    let mut b = 0.0;
    let (mut loss, mut grad, mut grad_b) = loss_and_gradient(x, y, &w, b, opts.l2_lambda);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if max_abs(&grad, grad_b) <= opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let direction = newton_direction(x, &w, b, opts.l2_lambda, &grad, grad_b)
            .unwrap_or_else(|| grad.iter().map(|g| -g).chain(std::iter::once(-grad_b)).collect());
        let slope: f64 = direction
            .iter()
            .zip(grad.iter().chain(std::iter::once(&grad_b)))
            .map(|(d, g)| d * g)
            .sum();
        // Backtracking line search with the Armijo condition.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand_w: Vec<f64> = w.iter().zip(&direction).map(|(wi, d)| wi + t * d).collect();
            let cand_b = b + t * direction[p];
            let (cand_loss, cand_grad, cand_gb) = loss_and_gradient(x, y, &cand_w, cand_b, opts.l2_lambda);
            if cand_loss <= loss + 1e-4 * t * slope || (cand_loss - loss).abs() <= f64::EPSILON * loss.abs() {
                w = cand_w;
                b = cand_b;
                loss = cand_loss;
                grad = cand_grad;
                grad_b = cand_gb;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged && max_abs(&grad, grad_b) <= opts.tol {
        converged = true;
    }
    Ok(LogisticModel {
        format_version: MODEL_FORMAT_VERSION,
        columns: x.columns.clone(),
        weights: w,
        bias: b,
        l2_lambda: opts.l2_lambda,
        converged,
        iterations,
    })
}

pub fn predict_multiscore(m: &LogisticModel, x: &FeatureMatrix) -> Result<Vec<f64>, AggregationError> {
    if m.columns != x.columns {
        return Err(AggregationError::ColumnMismatch {
            expected: m.columns.clone(),
            got: x.columns.clone(),
        });
    }
    Ok((0..x.n_rows()).map(|i| sigmoid(m.decision(x.row(i)))).collect())
}
