//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

use crate::oracle::LedgerSnapshot;

/// Errors produced by model, oracle, signature, attack and evaluation code.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An argument lies outside its valid domain (label out of range, non-finite value, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates its documented invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A linear system could not be solved.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Two signatures were built from different perturbation plans.
    #[error("signatures are not comparable: plan fingerprint {left} != {right}")]
    Incomparable { left: String, right: String },

    /// A distance or statistic is undefined for the given input.
    #[error("undefined: {0}")]
    Undefined(String),

    /// A selection was requested over an empty candidate set.
    #[error("empty candidate set: {0}")]
    Empty(String),

    /// Network failure talking to a remote oracle, after retries.
    /// `partial` is the oracle ledger at the time of failure.
    #[error("transport error: {message} (ledger at failure: {partial})")]
    Transport {
        message: String,
        partial: LedgerSnapshot,
    },

    /// The remote side answered with something that violates the wire protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A stage that fans out over many items stopped early.
    #[error("{stage} aborted after {completed}/{total} items: {source}")]
    Partial {
        stage: &'static str,
        completed: usize,
        total: usize,
        #[source]
        source: Box<Error>,
    },

    /// A persisted file failed a checksum or could not be decoded.
    #[error("integrity error in {}: {reason}", path.display())]
    Integrity { path: PathBuf, reason: String },

    /// Malformed serialized bytes (not tied to a particular file).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Server could not start.
    #[error("startup error: {0}")]
    Startup(String),
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
