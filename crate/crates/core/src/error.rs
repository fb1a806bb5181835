//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid bounding box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("image dimensions must be positive, got {width}x{height}")]
    BadImageSize { width: f64, height: f64 },

    #[error("circle radius must be non-negative, got {0}")]
    NegativeRadius(f64),

    #[error("run-length mask for {width}x{height} must cover {expected} pixels, runs sum to {sum}")]
    RleMismatch {
        width: u32,
        height: u32,
        expected: u64,
        sum: u64,
    },

    #[error("{path}:{line}: {reason}")]
    Format {
        path: String,
        line: u64,
        reason: String,
    },

    #[error("no adapter declared for dataset `{0}`")]
    UnknownDataset(String),

    #[error("duplicate image `{image}` in dataset `{dataset}`")]
    DuplicateImage { dataset: String, image: String },

    #[error("template `{task}` has no placeholder value for `{placeholder}`")]
    MissingPlaceholder { task: String, placeholder: String },

    #[error("record kind does not match task `{task}`: {reason}")]
    TaskMismatch { task: String, reason: String },

    #[error("no template registered for task `{0}`")]
    UnknownTask(String),

    #[error("conversation `{sample}` is malformed: {reason}")]
    BadConversation { sample: String, reason: String },

    #[error("mixture spec is invalid: {0}")]
    BadMixture(String),

    #[error("ticket {index} references empty pool for {task}/{dataset}")]
    EmptyPool {
        index: u64,
        task: String,
        dataset: String,
    },

    #[error("labeler error: {0}")]
    Labeler(String),

    #[error("no precomputed labels for report `{0}`")]
    MissingLabelRow(String),

    #[error("metric input is invalid: {0}")]
    BadMetricInput(String),

    #[error("prediction/reference ids do not align: {0}")]
    IdMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },

    #[error("validation failed: {0} violation(s)")]
    Validation(usize),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, line: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            reason: reason.into(),
        }
    }
}
