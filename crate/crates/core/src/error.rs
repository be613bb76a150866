use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A malformed input line, reported with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineDiagnostic {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{} malformed line(s); first: {}", .count, format_offenders(.offenders))]
    Parse {
        count: usize,
        /// At most the first ten offenders.
        offenders: Vec<LineDiagnostic>,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("no pixels have hue <= {threshold}")]
    EmptyHighlightRegion { threshold: f64 },

    #[error("stratum `{stratum}` has {available} qualifying images, {requested} requested")]
    StratumUnderflow {
        stratum: &'static str,
        available: usize,
        requested: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_offenders(offenders: &[LineDiagnostic]) -> String {
    offenders
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
