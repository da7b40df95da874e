use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UdError {
    #[error("image is empty ({width}x{height}); expected at least 1x1 pixels")]
    EmptyImage { width: usize, height: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient cohort: {found} lesion(s), outlier analysis needs at least {required}")]
    InsufficientCohort { found: usize, required: usize },

    #[error("model is not trained: {0}")]
    Untrained(String),

    #[error(
        "segmenter has {count} trainable parameters, outside the allowed band [{min}, {max}]"
    )]
    ParameterBudget { count: usize, min: usize, max: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("mismatched identifiers: {0}")]
    Mismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, UdError>;
