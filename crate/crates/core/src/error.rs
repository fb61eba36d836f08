// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every stage of the toolkit.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (rejected before any work happens).
    #[error("configuration error: {0}")]
    Config(String),

    /// A world could not be constructed with the requested properties.
    #[error("world construction error: {0}")]
    World(String),

    /// Bad model input (overlong sequence, unknown token id, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Layer or head index outside the model shape.
    #[error("index error: {0}")]
    Index(String),

    /// Training produced a non-finite loss or diverged.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// Interventions that cannot be combined.
    #[error("composition error: {0}")]
    Composition(String),

    /// A record key had no bin assignment.
    #[error("aggregation error: no bin for key `{0}`")]
    MissingBin(String),

    /// Not enough examples to draw a selection set.
    #[error("selection error: {0}")]
    Selection(String),

    /// Every head scored zero, so no head can be selected.
    #[error("degenerate model: {0}")]
    Degenerate(String),

    /// Numerical routine failed to converge.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A persisted artifact had the wrong magic, version, or layout.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
