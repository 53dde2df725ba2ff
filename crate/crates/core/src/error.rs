use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A non-finite value came out of a coupling layer or the loss.
    #[error("numerical instability in coupling layer {layer}: {detail}")]
    Instability { layer: usize, detail: String },

    /// Training hit a non-finite loss. `params` holds the last finite parameter vector.
    #[error("non-finite loss at step {step}")]
    TrainingDiverged { step: usize, params: Vec<f64> },

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown benchmark `{0}`")]
    NotFound(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("model format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
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

    /// Exit-code contract for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Instability { .. } | Error::TrainingDiverged { .. } => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
