use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {asymmetry:e} exceeds tolerance {tol:e}")]
    NonSymmetric { asymmetry: f64, tol: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("batch of {n} rows is too small; at least {min} required")]
    BatchTooSmall { n: usize, min: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension {dim} exceeds supported maximum {max}")]
    DimensionTooLarge { dim: usize, max: usize },

    #[error("Jacobi iteration did not converge within {sweeps} sweeps (off-diagonal ratio {residual:e})")]
    NotConverged { sweeps: usize, residual: f64 },

    #[error("cross-block regularization needs at least 2 blocks, got {0}")]
    TooFewBlocks(usize),

    #[error("patch grid {h}x{w} is smaller than the 4x4 minimum")]
    GridTooSmall { h: usize, w: usize },

    #[error("target blocks covered the whole grid in {attempts} attempts")]
    EmptyContext { attempts: usize },

    #[error("prediction has no target patches")]
    EmptyTargets,

    #[error("backward called without a cached forward pass")]
    NoCachedForward,

    #[error("EMA momentum {0} is outside [0, 1]")]
    MomentumOutOfRange(f64),

    #[error("eigenvalue {value:e} is below the clamp tolerance {tol:e}")]
    NegativeEigenvalue { value: f64, tol: f64 },

    #[error("step too large: |rate * dt| = {product:e} exceeds {limit}")]
    StepTooLarge { product: f64, limit: f64 },

    #[error("step {step} is outside the schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("metrics logs are not aligned: {0}")]
    MisalignedLogs(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("I/O: {0}")]
    Io(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io(e.to_string()),
            _ => Error::Parse { line, message: e.to_string() },
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::ShapeMismatch { expected: expected.into(), got: got.into() }
}
