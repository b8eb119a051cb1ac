//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum UspError {
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },

    #[error("classification task requires queries with an option list (query `{0}`)")]
    ClsWithoutOptions(String),

    #[error("invalid class distribution: {0}")]
    InvalidDistribution(String),

    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),

    #[error("backend rejected request (status {status}): {body}")]
    BackendRejected { status: u16, body: String },

    #[error("backend does not support option scoring; treat the task as short-form generation instead")]
    BackendNoScoringSupport,

    #[error("cache store i/o error at {path}: {reason}")]
    StoreIo { path: String, reason: String },

    #[error("embedding provider unreachable: {0}")]
    ProviderUnreachable(String),

    #[error("cannot embed empty text")]
    EmptyText,

    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("unknown normalization profile `{0}`")]
    UnknownProfile(String),

    #[error("majority vote over an empty answer list")]
    EmptyInput,

    #[error("at least one reference is required")]
    NoReferences,

    #[error("need at least 2 samples to score agreement, got {0}")]
    DegenerateM(usize),

    #[error("selection pool is empty")]
    EmptyPool,

    #[error("pool is not a classification pool: {0}")]
    NonClsPool(String),

    #[error("not enough queries to fill class `{class}`: need {needed}, have {available}")]
    InsufficientQueries {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("demo set holds {available} demos, cannot draw {requested}")]
    InsufficientDemos { requested: usize, available: usize },

    #[error("every query failed in {stage}: {detail}")]
    AllQueriesFailed { stage: String, detail: String },

    #[error("template render failure: {0}")]
    TemplateRenderFailure(String),

    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),
}

pub type Result<T> = std::result::Result<T, UspError>;
