use std::path::PathBuf;

/// Errors raised by the library layers. The CLI maps these onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("state outside the safe set: h(x) = {value}")]
    OutOfSet { value: f64 },

    #[error("evaluation produced a non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("integration blow-up at t = {t}")]
    IntegrationBlowup { t: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dataset too small: {rows} rows (need at least {min})")]
    DatasetTooSmall { rows: usize, min: usize },

    #[error("training diverged (NaN loss) in member {member}, epoch {epoch}, batch {batch}")]
    NanLoss {
        member: usize,
        epoch: usize,
        batch: usize,
    },

    #[error("unsupported model file version {found} (expected version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
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

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
