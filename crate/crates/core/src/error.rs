use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error("unknown diagnosis code `{0}`")]
    UnknownDiagnosis(String),

    #[error("image/mask dimension mismatch for {image_id}: image {image:?}, mask {mask:?}")]
    DimensionMismatch {
        image_id: String,
        image: (u32, u32),
        mask: (u32, u32),
    },

    #[error("cannot decode image {}: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },

    #[error("empty lesion mask")]
    EmptyMask,

    #[error("lesion covers the whole image; no skin pixels")]
    NoSkin,

    #[error("feature extraction failed for {lesion}: {source}")]
    Feature {
        lesion: String,
        #[source]
        source: Box<Error>,
    },

    #[error("constant input has no correlation")]
    ConstantInput,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("optimizer diverged: {0}")]
    NonFinite(String),

    #[error("feature names do not match model: expected {expected:?}, got {got:?}")]
    FeatureMismatch {
        expected: Vec<String>,
        got: Vec<String>,
    },

    #[error("insufficient patients: {0}")]
    InsufficientPatients(String),

    #[error("unsatisfiable sample composition: {0}")]
    Unsatisfiable(String),

    #[error("invalid prediction file {}: {reason}", path.display())]
    Prediction { path: PathBuf, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
