//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("transport failure on endpoint '{endpoint}': {message}")]
    Transport { endpoint: String, message: String },

    #[error("endpoint misconfigured: {0}")]
    EndpointMisconfigured(String),

    #[error("text is empty after trimming")]
    EmptyText,

    #[error("judge output unparseable after {attempts} attempts")]
    JudgeParse { attempts: u32 },

    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("cosine undefined for an all-zero vector")]
    ZeroVector,

    #[error("topic generation produced no candidates above tau_z: {0}")]
    TopicGeneration(String),

    #[error("sample generation admitted no candidates: {0}")]
    SampleGeneration(String),

    #[error("chain generation yielded fewer than 2 queries: {0}")]
    ChainGeneration(String),

    #[error("all chains pruned; no candidate survived simulation")]
    AllChainsPruned,

    #[error("no chains available for traversal")]
    NoChainsAvailable,

    #[error("run incomplete: {0}")]
    IncompleteRun(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate behavior id '{0}'")]
    DuplicateId(String),

    #[error("config drift: state digest {expected} does not match current config digest {actual}")]
    ConfigDrift { expected: String, actual: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn transport(endpoint: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Transport {
            endpoint: endpoint.into(),
            message: message.into(),
        }
    }
}
