use std::io;

use thiserror::Error;

use crate::rma::WindowId;

/// Everything that can abort a job or reject a call.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("resource error: {0}")]
    Resource(String),

    /// Out-of-bounds or otherwise malformed remote access. Aborts the job.
    #[error("protocol error on rank {rank} window {window:?}: {msg}")]
    Protocol {
        rank: usize,
        window: WindowId,
        msg: String,
    },

    /// Caller broke an API contract (missing epoch, misaligned atomic, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("corrupt record stream at byte {offset}: {msg}")]
    Corruption { offset: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Another worker aborted the job; this worker stopped at its next
    /// synchronization point.
    #[error("job aborted")]
    Aborted,

    /// Deliberate failure requested through `JobConfig::fault`.
    #[error("injected fault on rank {rank} after {tasks} completed tasks")]
    InjectedFault { rank: usize, tasks: usize },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
