use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("i/o error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("cannot normalize a constant volume")]
    DegenerateNormalization,

    #[error("corrupted transform record: {0}")]
    CorruptedRecord(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("step index {index} out of range for schedule of length {len}")]
    Index { index: usize, len: usize },

    #[error("predictor contract violated: {0}")]
    Contract(String),

    #[error("foreground mask is empty")]
    NoForeground,

    #[error("incomplete patch coverage: {0}")]
    IncompleteCoverage(String),

    #[error("unknown name: {0}")]
    Lookup(String),

    #[error("name already registered: {0}")]
    Conflict(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("cardinality error: {0}")]
    Cardinality(String),

    #[error("incomplete input: {0}")]
    Completeness(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("signed-rank test undefined: all differences are zero")]
    UndefinedTest,

    #[error("reference has zero energy")]
    DegenerateReference,

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("external model failed: {0}")]
    External(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
