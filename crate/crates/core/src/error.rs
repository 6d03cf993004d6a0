use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("I/O error on {path}: {source}")]
    IoPath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing required PLY field `{0}`")]
    MissingField(String),

    #[error("scene contains no primitives")]
    EmptyScene,

    #[error("non-finite value in field `{field}` at vertex {index}")]
    NonFinite { index: usize, field: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("no path: {0}")]
    NoPath(String),

    #[error("sampling exhausted after {attempts} attempts: {what}")]
    SamplingExhausted { attempts: usize, what: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoPath {
            path: path.into(),
            source,
        }
    }
}
