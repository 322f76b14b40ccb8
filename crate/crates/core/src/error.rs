use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation (e.g. the norm of an empty vector).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration: bad widths, shape mismatches, lane capacity violations.
    #[error("config error: {0}")]
    Config(String),

    #[error("value {value} at index {index} does not fit in {width} bits after offset {offset}")]
    Range {
        index: usize,
        value: i64,
        width: u8,
        offset: i32,
    },

    #[error("format error: {0}")]
    Format(String),

    /// A collective did not complete. `peer` is the rank we were waiting on, if known.
    #[error("collective error at generation {generation}, phase {phase}, rank {rank} (peer {peer:?}): {reason}")]
    Collective {
        generation: u64,
        phase: &'static str,
        rank: usize,
        peer: Option<usize>,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by the caller's configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Domain(_) | Error::Range { .. } | Error::Json(_)
        )
    }
}
