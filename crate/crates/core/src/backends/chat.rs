use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, Endpoint, Transport};

/// Deepest top-logprobs list the chat protocol allows.
pub const MAX_TOP_LOGPROBS: u8 = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    pub top_logprobs: u8,
    /// Sampling seed; distinguishes otherwise identical sampling requests.
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            messages: vec![Message::user(prompt)],
            temperature: 1.0,
            max_tokens: 1,
            want_logprobs: false,
            top_logprobs: 0,
            seed: None,
        }
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("messages must not be empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        if self.top_logprobs > MAX_TOP_LOGPROBS {
            return Err(BackendError::InvalidRequest(format!(
                "top_logprobs {} exceeds {MAX_TOP_LOGPROBS}",
                self.top_logprobs
            )));
        }
        Ok(())
    }

    pub fn to_wire(&self) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "logprobs": self.want_logprobs,
        });
        if self.want_logprobs {
            body["top_logprobs"] = json!(self.top_logprobs);
        }
        if let Some(seed) = self.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

/// Candidate log-probabilities for the first generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstTokenLogits {
    pub entries: Vec<(String, f64)>,
}

/// Per-token log-probabilities of a generated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub tokens: Vec<(String, f64)>,
}

impl TokenLogprobs {
    pub fn logprobs(&self) -> impl Iterator<Item = f64> + '_ {
        self.tokens.iter().map(|(_, lp)| *lp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub token_logprobs: Option<TokenLogprobs>,
    pub first_token: Option<FirstTokenLogits>,
}

fn checked_logprob(v: &Value, what: &str) -> Result<f64, BackendError> {
    let lp = v
        .as_f64()
        .ok_or_else(|| BackendError::Malformed(format!("{what}: logprob is not a number")))?;
    if !lp.is_finite() && lp != f64::NEG_INFINITY {
        return Err(BackendError::Malformed(format!("{what}: non-finite logprob")));
    }
    if lp > 0.0 {
        return Err(BackendError::Malformed(format!("{what}: positive logprob {lp}")));
    }
    Ok(lp)
}

/// Extracts text and, when requested, logprob structures from a chat reply.
pub fn parse_completion(v: &Value, want_logprobs: bool) -> Result<Completion, BackendError> {
    let choice = v
        .pointer("/choices/0")
        .ok_or_else(|| BackendError::Malformed("missing choices[0]".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?
        .to_string();
    if !want_logprobs {
        return Ok(Completion {
            text,
            token_logprobs: None,
            first_token: None,
        });
    }
    let content = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Malformed("missing choices[0].logprobs.content".into()))?;
    if content.is_empty() {
        return Err(BackendError::Malformed("empty logprobs.content".into()));
    }
    let mut tokens = Vec::with_capacity(content.len());
    for entry in content {
        let token = entry.get("token").and_then(Value::as_str).unwrap_or_default().to_string();
        let lp = checked_logprob(entry.get("logprob").unwrap_or(&Value::Null), "logprobs.content")?;
        tokens.push((token, lp));
    }
    let mut entries = Vec::new();
    if let Some(top) = content[0].get("top_logprobs").and_then(Value::as_array) {
        for alt in top {
            let token = alt.get("token").and_then(Value::as_str).unwrap_or_default().to_string();
            let lp = checked_logprob(alt.get("logprob").unwrap_or(&Value::Null), "top_logprobs")?;
            entries.push((token, lp));
        }
    }
    if entries.is_empty() {
        entries.push(tokens[0].clone());
    }
    Ok(Completion {
        text,
        token_logprobs: Some(TokenLogprobs { tokens }),
        first_token: Some(FirstTokenLogits { entries }),
    })
}

#[derive(Clone)]
pub struct ChatClient {
    transport: Arc<dyn Transport>,
}

impl ChatClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self { transport }
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError> {
        req.validate()?;
        let reply = self.transport.post(Endpoint::Chat, &req.to_wire())?;
        parse_completion(&reply, req.want_logprobs)
    }
}
