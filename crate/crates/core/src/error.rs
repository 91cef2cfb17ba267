//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),

    #[error("unknown speaker tag: {0}")]
    UnknownSpeaker(String),

    #[error("chunk length must be >= 2, got {0}")]
    ChunkTooShort(usize),

    #[error("domain {domain} has {got} chunks, need at least {need} to split")]
    TooFewChunks {
        domain: String,
        got: usize,
        need: usize,
    },

    #[error("malformed record at line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },

    #[error("unknown token: {0}")]
    UnknownToken(String),

    #[error("token id {0} out of range")]
    InvalidTokenId(u32),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("classifier needs at least 2 domains, got {0}")]
    SingleDomain(usize),

    #[error("mask length {mask} does not match sequence length {seq}")]
    MaskLengthMismatch { mask: usize, seq: usize },

    #[error("sequence too short: need at least {need} tokens, got {got}")]
    SequenceTooShort { need: usize, got: usize },

    #[error("invalid generation config: {0}")]
    InvalidGeneration(String),

    #[error("all probability mass suppressed: degenerate distribution")]
    DegenerateDistribution,

    #[error("non-finite gradient passed to optimizer")]
    NonFiniteGradient,

    #[error("invalid dp config: {0}")]
    InvalidDpConfig(String),

    #[error("invalid accountant input: {0}")]
    InvalidAccountant(String),

    #[error("schedule step {t} exceeds horizon {horizon}")]
    StepBeyondHorizon { t: usize, horizon: usize },

    #[error("invalid train plan: {0}")]
    InvalidPlan(String),

    #[error("invalid attack config: {0}")]
    InvalidAttack(String),

    #[error("empty continuation: conditional perplexity undefined")]
    EmptyContinuation,

    #[error("snapshot format error: {0}")]
    SnapshotFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
