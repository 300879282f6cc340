use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pool configuration: {0}")]
    Config(String),

    #[error("point ({u}, {v}) outside {rows}x{cols} grid")]
    OutOfBounds { u: f64, v: f64, rows: usize, cols: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at channel {channel}, cell {cell}")]
    Numeric { channel: usize, cell: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("volume format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("unknown key-point label `{0}`")]
    Label(String),

    #[error("malformed XML at line {line}: {message}")]
    Xml { line: u32, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("not enough constraints: {equations} equations, need at least 8")]
    Rank { equations: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("point maps to infinity (denominator {denominator:e})")]
    Projective { denominator: f64 },

    #[error("homography is singular")]
    Singular,

    #[error("RANSAC found no model with a minimal consensus after {iterations} iterations")]
    NoModel { iterations: usize },

    #[error("insufficient detections: {equations} equations from {points} point and {lines} line constraints ({found})")]
    InsufficientDetections {
        equations: usize,
        points: usize,
        lines: usize,
        found: String,
    },

    #[error("camera sampling gave up after {attempts} attempts")]
    Sampling { attempts: usize },

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
}

impl Error {
    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_)
            | Error::OutOfBounds { .. }
            | Error::Validation { .. }
            | Error::Label(_)
            | Error::Input(_)
            | Error::Domain(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Format { .. } | Error::Xml { .. } | Error::Json { .. } => "format",
            Error::Io { .. } => "io",
            Error::Numeric { .. }
            | Error::Rank { .. }
            | Error::Degenerate(_)
            | Error::Projective { .. }
            | Error::Singular
            | Error::NoModel { .. }
            | Error::InsufficientDetections { .. }
            | Error::Sampling { .. } => "estimation",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), message: message.into() }
    }
}
