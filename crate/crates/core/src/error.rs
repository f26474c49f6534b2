use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid value for {field}: {reason}")]
    InvalidValue { field: String, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("symmetric eigensolver failed on a {size}x{size} matrix (trace {trace:e}, max |entry| {max_abs:e})")]
    EigenFailure {
        size: usize,
        trace: f64,
        max_abs: f64,
    },

    #[error("Gauss-Newton system solve failed: smallest NTK eigenvalue {sigma2:e}, damping {epsilon:e}")]
    SolveFailure { sigma2: f64, epsilon: f64 },

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("matrix has rank {rank}, fewer than its {rows} rows")]
    RankDeficient { rank: usize, rows: usize },

    #[error("format version mismatch in {path}: expected {expected}, found {found}")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("checksum failure in {path}: expected {expected}, computed {computed}")]
    Checksum {
        path: PathBuf,
        expected: String,
        computed: String,
    },

    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("missing figure series: {0}")]
    MissingSeries(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            found,
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidValue {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
