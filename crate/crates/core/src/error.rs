use std::io;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid N:M config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("pruning window (rows {row_start}.., column group {group}) holds {found} nonzero vectors, at most {allowed} allowed")]
    TooManyNonzeroVectors {
        row_start: usize,
        group: usize,
        found: usize,
        allowed: usize,
    },

    #[error("invalid block plan: {0}")]
    InvalidPlan(String),

    #[error("fast memory of {capacity} bytes cannot hold a k_s of {m_window} for m_s={m_s}, n_s={n_s}")]
    CapacityTooSmall {
        capacity: usize,
        m_s: usize,
        n_s: usize,
        m_window: usize,
    },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("unknown hardware profile `{0}`")]
    UnknownProfile(String),

    #[error("at least 3 repeats are required, got {0}")]
    TooFewRepeats(usize),

    #[error("refusing to write an empty report")]
    EmptyReport,

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
