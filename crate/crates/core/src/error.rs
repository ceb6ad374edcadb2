use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("allocation plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("sequence of length {len} exceeds context {context}")]
    Length { len: usize, context: usize },

    #[error("invalid language spec: {0}")]
    InvalidSpec(String),

    #[error("not enough tokens to sample: need {needed}, have {available}")]
    SampleSize { needed: usize, available: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported similarity {value} at layer {layer}: allocation needs S > 0")]
    UnsupportedSimilarity { layer: usize, value: f64 },

    #[error("budget {budget} cannot give each of {layers} layers at least one expert")]
    Budget { budget: usize, layers: usize },

    #[error("reconciliation infeasible: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::NumericalFailure(_) => "numerical_failure",
            Error::Shape(_) => "shape",
            Error::PlanMismatch(_) => "plan_mismatch",
            Error::Configuration(_) => "configuration",
            Error::Length { .. } => "length",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::SampleSize { .. } => "sample_size",
            Error::Format(_) => "format",
            Error::UnsupportedSimilarity { .. } => "unsupported_similarity",
            Error::Budget { .. } => "budget",
            Error::Infeasible(_) => "infeasible",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
