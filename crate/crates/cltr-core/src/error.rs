use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum CltrError {
    /// A dataset file could not be parsed. Carries the 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A dataset file contained no documents.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// An argument fell outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller violated an API contract (e.g. unclipped zero propensity).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An exhaustive-enumeration guard tripped (query too large).
    #[error("enumeration guard: {0}")]
    Guard(String),

    /// Renyi divergence is undefined: the new policy puts weight where the
    /// logging policy has none.
    #[error("divergence undefined: query {query} doc {doc} has zero logging weight")]
    DivergenceUndefined { query: u64, doc: u32 },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A gradient became non-finite during training.
    #[error("non-finite gradient at epoch {epoch}: {detail}")]
    NonFiniteGradient { epoch: usize, detail: String },

    /// Simulation was asked to produce an empty log.
    #[error("empty click log: {0}")]
    EmptyLog(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CltrError>;
