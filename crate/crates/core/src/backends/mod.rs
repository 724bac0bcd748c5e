//! Wire-protocol clients for the detector/generator LLM, the NLI classifier
//! and the embedding service, plus fixture record/replay.

mod chat;
mod embed;
pub mod fixtures;
mod nli;
mod transport;

use std::sync::Arc;

pub use chat::{
    parse_completion, ChatClient, ChatRequest, Completion, FirstTokenLogits, Message, TokenLogprobs,
    MAX_TOP_LOGPROBS,
};
pub use embed::{EmbedClient, EmbeddingVector};
pub use fixtures::{canonical_json, request_digest, sort_fixture_file, FixtureRecord, RecordingTransport, ReplayTransport};
pub use nli::{NliClient, NliVerdict};
pub use transport::{Endpoint, EndpointConfig, HttpTransport, RetryPolicy, Transport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("{endpoint} transport failed after {attempts} attempts: {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no fixture recorded for request {digest}")]
    FixtureMiss { digest: String },
    #[error("NLI probabilities sum to {0}")]
    InvalidDistribution(f64),
    #[error("empty text")]
    EmptyText,
    #[error("embedding dimension {got} differs from first observed {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("io: {0}")]
    Io(String),
}

/// How model requests are served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Record,
    Replay,
}

impl std::str::FromStr for BackendMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Self::Live),
            "record" => Ok(Self::Record),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown mode {other:?} (expected live|record|replay)")),
        }
    }
}

/// The three clients sharing one transport.
#[derive(Clone)]
pub struct Backends {
    pub chat: ChatClient,
    pub nli: NliClient,
    pub embed: EmbedClient,
}

impl Backends {
    pub fn new(transport: Arc<dyn Transport>, embedding_model: &str) -> Self {
        Self {
            chat: ChatClient::new(Arc::clone(&transport)),
            nli: NliClient::new(Arc::clone(&transport)),
            embed: EmbedClient::new(transport, embedding_model),
        }
    }
}
