use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("missing column `{0}` in header")]
    MissingColumn(String),

    #[error("duplicate image_id `{0}`")]
    DuplicateId(String),

    #[error("image `{0}`: every day of the engagement sequence is missing")]
    UnusableSequence(String),

    #[error("column `{0}` has no present values")]
    AllMissingColumn(String),

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("feature set is empty")]
    EmptyFeatureSet,

    #[error("image `{image_id}`: feature `{feature}` is missing (impute first)")]
    NotImputed { image_id: String, feature: String },

    #[error("invalid {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("sequence is not repaired (missing days or decreasing values)")]
    UnrepairedSequence,

    #[error("shape is degenerate (zero scale)")]
    DegenerateShape,

    #[error("input is empty")]
    EmptyInput,

    #[error("at least 2 clusters are required, found {0}")]
    TooFewClusters(usize),

    #[error("point {0} has no cluster label")]
    UnlabeledPoint(usize),

    #[error("training labels contain a single class")]
    SingleClass,

    #[error("column mismatch: model expects [{expected}], input has [{found}]")]
    ColumnMismatch { expected: String, found: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("input is constant; rank correlation is undefined")]
    ConstantInput,

    #[error("{folds} folds exceed the smallest class size {smallest}")]
    FoldsExceedClass { folds: usize, smallest: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("evaluation run {run} failed: {source}")]
    RunFailed {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }
}
