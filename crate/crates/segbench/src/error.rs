//! Error type shared by every module, with the CLI exit-code mapping.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("value out of range: {0}")]
    ValueOutOfRange(String),
    #[error("invalid region count: {0}")]
    InvalidCount(String),
    #[error("grid cell has zero area: {0}")]
    EmptyCell(String),
    #[error("region out of bounds: {0}")]
    RegionOutOfBounds(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("training diverged: {0}")]
    DivergedTraining(String),
    #[error("model gradients unavailable: {0}")]
    ModelGradientUnavailable(String),
    #[error("pruning rate out of range: {0}")]
    RateOutOfRange(String),
    #[error("corruption level out of range: {0}")]
    LevelOutOfRange(String),
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    #[error("missing image/label pair: {0}")]
    MissingPair(String),
    #[error("unreadable file: {0}")]
    UnreadableFile(String),
    #[error("label value out of range: {0}")]
    LabelValueOutOfRange(String),
    #[error("invalid split fraction: {0}")]
    InvalidFraction(String),
    #[error("all classes empty: {0}")]
    AllClassesEmpty(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: 0 success, 2 config, 3 data, 4 model, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Config(_) => 2,
            MissingPair(_) | UnreadableFile(_) | LabelValueOutOfRange(_) | InvalidFraction(_)
            | InvalidParams(_) | Io(_) | ShapeMismatch(_) | ValueOutOfRange(_) => 3,
            InvalidSpec(_) | DivergedTraining(_) | ModelGradientUnavailable(_)
            | UnsupportedModel(_) | RateOutOfRange(_) | LevelOutOfRange(_) => 4,
            _ => 1,
        }
    }
}
