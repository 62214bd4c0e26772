use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid meta-class count {n_meta} for {n_classes} classes (need 2 <= N <= N_C)")]
    InvalidArity { n_classes: usize, n_meta: usize },

    #[error("rows of the coding matrix still collide after {attempts} attempts")]
    RowCollision { attempts: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("value {value} out of range {what}")]
    Range { value: i64, what: String },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss{}", .learner.map(|l| format!(" in learner {l}")).unwrap_or_default())]
    NonFiniteLoss { learner: Option<usize> },

    #[error("invalid sharing strategy: {0}")]
    InvalidStrategy(String),

    #[error("empty input")]
    EmptyInput,

    #[error("bad IDX magic 0x{found:08x} in {}, expected 0x{expected:08x}", .path.display())]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("sample count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated file {}", .0.display())]
    TruncatedFile(PathBuf),

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn context(self, context: impl Into<String>) -> Error {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// The innermost error once all context layers are peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
