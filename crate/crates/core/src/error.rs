use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition (empty input, bad parameter).
    #[error("usage error: {0}")]
    Usage(String),

    /// Two values that must be shape-aligned are not.
    #[error("structural error: {0}")]
    Structural(String),

    /// A binary input file is malformed.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// The experiment configuration could not be parsed.
    #[error("config syntax error at line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },

    /// The experiment configuration parsed but violates one or more constraints.
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    ConfigInvalid(Vec<String>),

    /// A federated round could not complete.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the experiment description rather than by execution.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::ConfigSyntax { .. } | Error::ConfigInvalid(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
