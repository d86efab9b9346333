use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// A vector whose norm is too small to normalize or to take a cosine against.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("capability not supported: {0}")]
    Capability(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error(
        "solver did not converge after {iterations} iterations (residual {residual:.3e}, tolerance {tolerance:.3e})"
    )]
    Convergence {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("dataset layout error: missing {}", .0.display())]
    Layout(PathBuf),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {param_norms}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norms: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short stable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Input(_) => "input",
            Error::Degenerate(_) => "degenerate",
            Error::Capability(_) => "capability",
            Error::Parameter(_) => "parameter",
            Error::Convergence { .. } => "convergence",
            Error::Format(_) => "format",
            Error::MetricUndefined(_) => "metric_undefined",
            Error::Layout(_) => "layout",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::Compatibility(_) => "compatibility",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
