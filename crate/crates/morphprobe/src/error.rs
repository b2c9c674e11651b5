use std::io;
use std::path::{Path, PathBuf};

use morphprobe_core::probe::ProbeError;
use thiserror::Error;

use crate::format::FormatError;

/// Everything the pipeline can fail with. Each variant maps to a process
/// exit code, see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {}; run `morphprobe {command}` first", path.display())]
    MissingArtifact { path: PathBuf, command: &'static str },
    #[error("numeric failure in cell {cell}: {source}")]
    Numeric { cell: String, source: ProbeError },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{context}: {message}")]
    Data { context: String, message: String },
}

impl Error {
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Numeric { .. } => 4,
            _ => 1,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Wraps a core error with the cell or file it happened in.
    pub fn data(context: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::Data {
            context: context.into(),
            message: err.to_string(),
        }
    }

    /// Training errors split into numeric failures and everything else.
    pub fn probe(cell: &str, err: ProbeError) -> Self {
        match err {
            ProbeError::NonFiniteGradient { .. } | ProbeError::NonFiniteLoss { .. } => Error::Numeric {
                cell: cell.to_string(),
                source: err,
            },
            other => Error::data(cell, other),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        let missing = Error::MissingArtifact {
            path: "a".into(),
            command: "ingest",
        };
        assert_eq!(missing.exit_code(), 3);
        assert!(missing.to_string().contains("morphprobe ingest"));
        let nan = Error::probe(
            "he/L06/diagnostic",
            ProbeError::NonFiniteLoss {
                epoch: 0,
                batch: 0,
                last_loss: 0.7,
            },
        );
        assert_eq!(nan.exit_code(), 4);
        assert_eq!(Error::probe("c", ProbeError::EmptyDataset).exit_code(), 1);
    }
}
