use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("non-binary sensitive attribute at row {row}, column {column}: {value}")]
    NonBinarySensitive {
        row: usize,
        column: String,
        value: String,
    },

    #[error("non-binary label at row {row}: {value}")]
    NonBinaryLabel { row: usize, value: String },

    #[error("header declares {found} sensitive columns, expected {expected}")]
    SensitiveCountMismatch { expected: usize, found: usize },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty split after rounding (fractions too small for n)")]
    EmptySplit,

    #[error("subset collection is empty after filtering")]
    EmptyCollection,

    #[error("membership column {0} is constant; collection was not built on this data")]
    ConstantColumn(usize),

    #[error("degenerate subset: membership vector has a single sign")]
    DegenerateSubset,

    #[error("degenerate variance: weighted membership has no variation")]
    DegenerateVariance,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value encountered during training at epoch {epoch}")]
    NonFiniteTraining { epoch: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("bad config value for `{key}`: {value}")]
    BadConfigValue { key: String, value: String },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("oracle check `{0}` failed")]
    OracleFailed(String),
}

impl Error {
    /// Process exit code for the CLI: 2 data, 3 numerical, 4 oracle, 1 usage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteTraining { .. } | Error::NonFinite(_) => 3,
            Error::OracleFailed(_) => 4,
            Error::InvalidArgument(_) | Error::UnknownConfigKey(_) | Error::BadConfigValue { .. } => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
