use thiserror::Error;

/// Errors raised anywhere in the simulator.
///
/// The CLI maps [`Error::is_config`] errors to exit code 1 and everything
/// else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A validation failure tied to a key of the experiment config file.
    #[error("invalid `{key}`{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    ConfigKey {
        key: String,
        line: Option<usize>,
        msg: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("numerical error at eigenvalue {index}: {msg}")]
    NonFinite { index: usize, msg: String },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::ConfigKey { .. } => true,
            Error::Round { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
