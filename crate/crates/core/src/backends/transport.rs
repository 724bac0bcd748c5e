use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::BackendError;

/// Remote service a request is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Chat,
    Nli,
    Embeddings,
}

impl Endpoint {
    pub fn path(self) -> &'static str {
        match self {
            Endpoint::Chat => "/v1/chat/completions",
            Endpoint::Nli => "/classify",
            Endpoint::Embeddings => "/v1/embeddings",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Endpoint::Chat => "chat",
            Endpoint::Nli => "nli",
            Endpoint::Embeddings => "embeddings",
        }
    }
}

/// Moves one JSON request body to an endpoint and returns the JSON reply.
///
/// Every model interaction in the crate goes through this trait, so the HTTP
/// client, the fixture replayer and in-test simulators are interchangeable.
pub trait Transport: Send + Sync {
    fn post(&self, endpoint: Endpoint, body: &Value) -> Result<Value, BackendError>;
}

impl<F> Transport for F
where
    F: Fn(Endpoint, &Value) -> Result<Value, BackendError> + Send + Sync,
{
    fn post(&self, endpoint: Endpoint, body: &Value) -> Result<Value, BackendError> {
        self(endpoint, body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Sleep before retry number `attempt` (1-based count of failures so far).
    pub fn delay(&self, attempt: u32) -> Duration {
        self.backoff_base * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EndpointConfig {
    pub base_url: String,
    pub bearer_token: Option<String>,
}

/// Blocking HTTP transport for the three services.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    chat: EndpointConfig,
    nli: EndpointConfig,
    embeddings: EndpointConfig,
    retry: RetryPolicy,
}

impl HttpTransport {
    pub fn new(
        chat: EndpointConfig,
        nli: EndpointConfig,
        embeddings: EndpointConfig,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                endpoint: "client".into(),
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            client,
            chat,
            nli,
            embeddings,
            retry,
        })
    }

    fn config(&self, endpoint: Endpoint) -> &EndpointConfig {
        match endpoint {
            Endpoint::Chat => &self.chat,
            Endpoint::Nli => &self.nli,
            Endpoint::Embeddings => &self.embeddings,
        }
    }
}

enum Attempt {
    Done(Value),
    Transient(String),
    Fatal(BackendError),
}

impl HttpTransport {
    fn attempt(&self, url: &str, cfg: &EndpointConfig, body: &Value) -> Attempt {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = &cfg.bearer_token {
            req = req.bearer_auth(token);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Attempt::Transient(format!("HTTP {status}"));
        }
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        if !status.is_success() {
            return Attempt::Fatal(BackendError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        match serde_json::from_str(&text) {
            Ok(v) => Attempt::Done(v),
            Err(e) => Attempt::Fatal(BackendError::Malformed(format!("response is not JSON: {e}"))),
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, endpoint: Endpoint, body: &Value) -> Result<Value, BackendError> {
        let cfg = self.config(endpoint);
        let url = format!("{}{}", cfg.base_url.trim_end_matches('/'), endpoint.path());
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts.max(1) {
            match self.attempt(&url, cfg, body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(msg) => {
                    log::warn!("{} attempt {attempt} failed: {msg}", endpoint.name());
                    last = msg;
                    if attempt < self.retry.max_attempts {
                        thread::sleep(self.retry.delay(attempt));
                    }
                }
            }
        }
        Err(BackendError::Transport {
            endpoint: endpoint.name().into(),
            attempts: self.retry.max_attempts.max(1),
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(1), Duration::from_secs(1));
        assert_eq!(p.delay(2), Duration::from_secs(2));
        assert_eq!(p.delay(3), Duration::from_secs(4));
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        // Bind then drop a listener so the port is very likely closed.
        let port = {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let cfg = EndpointConfig {
            base_url: format!("http://127.0.0.1:{port}"),
            bearer_token: None,
        };
        let retry = RetryPolicy {
            max_attempts: 3,
            backoff_base: Duration::from_millis(5),
        };
        let t = HttpTransport::new(cfg.clone(), cfg.clone(), cfg, retry, Duration::from_secs(2)).unwrap();
        let start = Instant::now();
        let err = t.post(Endpoint::Nli, &serde_json::json!({"premise": "a"})).unwrap_err();
        match err {
            BackendError::Transport { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
        // Two sleeps: 5 ms + 10 ms.
        assert!(start.elapsed() >= Duration::from_millis(15));
    }
}
