use thiserror::Error;

/// Errors raised by the estimation pipeline and its building blocks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("primitive count mismatch: expected {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },

    #[error("too few instances: need at least {needed}, got {got}")]
    TooFewInstances { needed: usize, got: usize },

    #[error("invalid latent dimension {dim} for {max} packed parameters")]
    InvalidLatentDim { dim: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("angle {0} deg is not in the symmetry set")]
    AngleNotInSpec(f64),

    #[error("malformed distribution in row {row}")]
    MalformedDistribution { row: usize },

    #[error("too few labels: need at least {needed} distinct labels, got {got}")]
    TooFewLabels { needed: usize, got: usize },

    #[error("degenerate difference vector in quadruple {index}")]
    DegenerateVector { index: usize },

    #[error("label set too small: {0} labels")]
    LabelSetTooSmall(usize),

    #[error("label {0} has no center")]
    MissingLabel(u32),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("parameters out of range: {0}")]
    ParamsOutOfRange(String),

    #[error("camera sees no points")]
    EmptyView,

    #[error("empty input list")]
    EmptyList,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io: {0}")]
    Io(String),

    #[error("format: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
