use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the probe pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("no respondents")]
    NoRespondents,

    #[error("no gold answers for question {0}")]
    NoGoldAnswers(String),

    #[error("unknown question id {0}")]
    UnknownQuestion(String),

    #[error("unknown respondent id {0}")]
    UnknownRespondent(String),

    #[error("invalid question metadata: {0}")]
    Metadata(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("invalid token distribution: {0}")]
    Distribution(String),

    #[error("backend error for prompt {hash}: {message}")]
    Backend { hash: String, message: String },

    #[error("cache error: {0}")]
    Cache(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing political leaning for question {0}")]
    MissingLeaning(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run incomplete: {unresolved} of {total} queries unresolved")]
    Incomplete { unresolved: usize, total: usize },

    #[error("no resolved results")]
    NoResults,

    #[error("paraphrase generation short by {short}: {survivors} unique paraphrases, {requested} requested")]
    ParaphraseShortfall {
        short: usize,
        survivors: usize,
        requested: usize,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
