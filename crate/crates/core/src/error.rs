use std::time::Duration;

use thiserror::Error;

use crate::queue::DoorbellKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} made no progress for {waited:?}")]
    Timeout { what: &'static str, waited: Duration },

    #[error("{kind:?} doorbell regression on queue {queue}: wrote {value}, last value {last}")]
    DoorbellRegression {
        queue: u32,
        kind: DoorbellKind,
        value: u64,
        last: u64,
    },

    #[error("device {0} is shut down")]
    DeviceShutdown(usize),

    #[error("{what} out of range: {index} >= {limit}")]
    OutOfRange {
        what: &'static str,
        index: u64,
        limit: u64,
    },

    #[error("line {line} released more times than it was pinned")]
    DoubleRelease { line: String },

    #[error("fetch of line {line} failed in another thread")]
    FetchFailed { line: String },

    #[error("command {cid} on device {device} completed with error status")]
    CommandFailed { device: usize, cid: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
