use std::sync::{Arc, OnceLock};

use serde_json::{json, Value};

use super::{BackendError, Endpoint, Transport};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Embedding client. The first successful call fixes the dimension; later
/// replies of another size are rejected.
pub struct EmbedClient {
    transport: Arc<dyn Transport>,
    model: String,
    dim: OnceLock<usize>,
}

impl EmbedClient {
    pub fn new(transport: Arc<dyn Transport>, model: impl Into<String>) -> Self {
        Self {
            transport,
            model: model.into(),
            dim: OnceLock::new(),
        }
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyText);
        }
        let reply = self
            .transport
            .post(Endpoint::Embeddings, &json!({"model": self.model, "input": text}))?;
        let raw = reply
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Malformed("missing data[0].embedding".into()))?;
        let values = raw
            .iter()
            .map(|v| v.as_f64().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| BackendError::Malformed("non-finite embedding entry".into()))?;
        if values.is_empty() {
            return Err(BackendError::Malformed("empty embedding".into()));
        }
        let expected = *self.dim.get_or_init(|| values.len());
        if expected != values.len() {
            return Err(BackendError::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(EmbeddingVector { values })
    }
}

impl Clone for EmbedClient {
    fn clone(&self) -> Self {
        let dim = OnceLock::new();
        if let Some(d) = self.dim.get() {
            let _ = dim.set(*d);
        }
        Self {
            transport: Arc::clone(&self.transport),
            model: self.model.clone(),
            dim,
        }
    }
}
