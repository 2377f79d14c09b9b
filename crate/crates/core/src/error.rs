use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("negative off-diagonal rate A({row},{col}) = {value}")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },

    #[error("generator row {row} sums to {sum:e}, expected 0")]
    RowSumNonZero { row: usize, sum: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("observation noise must be positive, got r = {0}")]
    NonPositiveNoise(f64),

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("not a probability vector: {0}")]
    InvalidSimplex(String),

    #[error("invariant measure is not unique (nullspace dimension {nullity})")]
    NonUniqueInvariantMeasure { nullity: usize },

    #[error("time grid mismatch: horizon {horizon} is not a multiple of dt = {dt}")]
    GridMismatch { horizon: f64, dt: f64 },

    #[error("filter mass vanished after clipping at step {step}; dt is too large for |h|/r")]
    DegenerateMass { step: usize },

    #[error("observed level at t = {time} has zero conditional mass")]
    EmptyLevelSet { time: f64 },

    #[error("absolute continuity violated at state {state}{}", time_index.map(|k| format!(" (time index {k})")).unwrap_or_default())]
    AbsoluteContinuityViolation {
        state: usize,
        time_index: Option<usize>,
    },

    #[error("series is not strictly positive on the fit window")]
    NonPositiveSeries,

    #[error("fit window holds {points} points, at least {required} required")]
    WindowTooShort { points: usize, required: usize },

    #[error("assumption a_lower > 0 fails: dmu/dnu vanishes at state {state}")]
    AssumptionA1Violated { state: usize },

    #[error("restricted variance form is singular (support size {support})")]
    DegenerateVarianceForm { support: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("noise-free model: {0}")]
    Noiseless(&'static str),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("path {path}: {inner}")]
    InPath { path: usize, inner: Box<Error> },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn in_path(self, path: usize) -> Self {
        Error::InPath {
            path,
            inner: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NegativeOffDiagonal { .. }
            | Error::RowSumNonZero { .. }
            | Error::DimensionMismatch(_)
            | Error::NonPositiveNoise(_)
            | Error::NonFinite(_)
            | Error::InvalidSimplex(_)
            | Error::GridMismatch { .. }
            | Error::Config { .. }
            | Error::Io(_) => ErrorKind::Config,
            Error::InPath { inner, .. } => inner.kind(),
            _ => ErrorKind::Numerical,
        }
    }

    /// Attaches a time index to continuity violations coming from pointwise helpers.
    pub(crate) fn at_time(self, k: usize) -> Self {
        match self {
            Error::AbsoluteContinuityViolation { state, .. } => Error::AbsoluteContinuityViolation {
                state,
                time_index: Some(k),
            },
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
