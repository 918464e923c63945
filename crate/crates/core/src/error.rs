use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid depth {0}: depth must be finite and strictly positive")]
    InvalidDepth(f64),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("correspondence lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("normal is not camera-facing (n . r = {0})")]
    Orientation(f64),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("unknown feature extractor `{0}`")]
    UnknownExtractor(String),

    #[error("descriptor mismatch: {0}")]
    DescriptorMismatch(String),

    #[error("insufficient matches: need at least {needed}, got {got}")]
    InsufficientMatches { needed: usize, got: usize },

    #[error("no consensus model found")]
    NoConsensus,

    #[error("ambiguous pose: no decomposition candidate is preferred by cheirality")]
    AmbiguousPose,

    #[error("matrix is not a rotation")]
    NotARotation,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("entry {entry}: quaternion norm {norm} is not unit")]
    BadQuaternion { entry: String, norm: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
