use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}{}: {message}", id.as_ref().map(|i| format!(" (id {i})")).unwrap_or_default())]
    MalformedRecord {
        line: usize,
        id: Option<String>,
        message: String,
    },

    #[error("record at line {line}{} is missing mandatory field `{field}`", id.as_ref().map(|i| format!(" (id {i})")).unwrap_or_default())]
    MissingField {
        line: usize,
        id: Option<String>,
        field: &'static str,
    },

    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    InvalidFractions([f64; 3]),

    #[error("corpus contains no ingredients")]
    EmptyCorpus,

    #[error("vocabulary is empty")]
    EmptyVocabulary,

    #[error("decision for unknown pair ({0}, {1})")]
    UnknownPair(String, String),

    #[error("malformed decisions line {line}: {message}")]
    MalformedDecision { line: usize, message: String },

    #[error("token index {index} out of range for vocabulary of size {size}")]
    TokenOutOfRange { index: usize, size: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("zero-norm vector: cosine similarity is undefined")]
    ZeroNorm,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("insufficient pairs: pool of {needed} requested but only {available} available (short by {})", needed - available)]
    InsufficientPairs { needed: usize, available: usize },

    #[error("discriminator output {value} outside (0, 1) in {term}")]
    NotProbability { term: &'static str, value: f64 },

    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotDistribution { row: usize, sum: f64 },

    #[error("covariance is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("overlap {overlap:.3} between recipes is below the required {required:.2}")]
    InsufficientOverlap { overlap: f64, required: f64 },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
