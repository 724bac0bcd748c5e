use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, Endpoint, Transport};

/// Largest deviation of the class-probability sum from 1 that is silently
/// renormalized.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliVerdict {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

impl NliVerdict {
    /// Validates a raw three-way distribution, renormalizing small drift.
    pub fn from_raw(entailment: f64, neutral: f64, contradiction: f64) -> Result<Self, BackendError> {
        let parts = [entailment, neutral, contradiction];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0 + RENORMALIZE_TOLERANCE) {
            return Err(BackendError::InvalidDistribution(parts.iter().sum()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(BackendError::InvalidDistribution(sum));
        }
        Ok(Self {
            entailment: entailment / sum,
            neutral: neutral / sum,
            contradiction: contradiction / sum,
        })
    }
}

#[derive(Clone)]
pub struct NliClient {
    transport: Arc<dyn Transport>,
}

impl NliClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self { transport }
    }

    pub fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliVerdict, BackendError> {
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(BackendError::EmptyText);
        }
        let reply = self
            .transport
            .post(Endpoint::Nli, &json!({"premise": premise, "hypothesis": hypothesis}))?;
        let field = |name: &str| {
            reply
                .get(name)
                .and_then(Value::as_f64)
                .ok_or_else(|| BackendError::Malformed(format!("NLI reply lacks {name}")))
        };
        NliVerdict::from_raw(field("entailment")?, field("neutral")?, field("contradiction")?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(reply: Value) -> NliClient {
        NliClient::new(Arc::new(move |_: Endpoint, _: &Value| Ok(reply.clone())))
    }

    #[test]
    fn passes_through_valid_distribution() {
        let c = client(json!({"entailment": 0.05, "neutral": 0.05, "contradiction": 0.9}));
        let v = c.classify("p", "h").unwrap();
        assert!((v.contradiction - 0.9).abs() < 1e-12);
    }

    #[test]
    fn renormalizes_small_drift_only() {
        let c = client(json!({"entailment": 0.5, "neutral": 0.2, "contradiction": 0.3005}));
        let v = c.classify("p", "h").unwrap();
        assert!((v.entailment + v.neutral + v.contradiction - 1.0).abs() < 1e-12);

        let c = client(json!({"entailment": 0.3, "neutral": 0.2, "contradiction": 0.2}));
        assert!(matches!(c.classify("p", "h"), Err(BackendError::InvalidDistribution(s)) if (s - 0.7).abs() < 1e-9));
    }

    #[test]
    fn empty_text_rejected() {
        let c = client(json!({}));
        assert!(matches!(c.classify("p", ""), Err(BackendError::EmptyText)));
    }
}
