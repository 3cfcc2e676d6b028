use thiserror::Error;

/// Errors surfaced by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A primitive received tensors whose shapes do not conform.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A precondition stated by an operation's contract was violated.
    #[error("contract violation in `{op}`: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("tor planting failed: {0}")]
    Planting(String),

    #[error("sequence assembly failed: {0}")]
    Assembly(String),

    #[error("tor feature extraction failed: {0}")]
    Extraction(String),

    #[error("loss is degenerate: {0}")]
    DegenerateLoss(String),

    #[error("unknown token id {0} (vocabulary ends at 261)")]
    UnknownToken(u32),

    #[error("score parse error: {0}")]
    ScoreParse(String),

    #[error("filter error: {0}")]
    Filter(String),

    #[error("curation transport error: {0}")]
    Transport(String),

    #[error("training pipeline error: {0}")]
    Pipeline(String),

    #[error("checkpoint error for `{path}`: {detail}")]
    Checkpoint { path: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
