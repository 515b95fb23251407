use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty cloud: {0}")]
    EmptyInput(String),

    #[error("degenerate vertical range: {0}")]
    DegenerateRange(String),

    #[error("cloud carries no bin labels")]
    MissingLabels,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: malformed file at byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged in {stage} at {at}: loss is {loss}")]
    Divergence {
        stage: &'static str,
        at: String,
        loss: f64,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
