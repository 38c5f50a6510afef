use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-real inverse: imaginary residue {0:e} exceeds tolerance")]
    NonRealInverse(f64),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("step out of range: t = {t}, valid 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("degenerate alpha at t = {0}")]
    DegenerateAlpha(usize),
    #[error("degenerate step at t = {0}: 1 - alpha_bar vanishes")]
    DegenerateStep(usize),
    #[error("negative radicand in sampling step t = {t} -> {t_prev}")]
    NegativeRadicand { t: usize, t_prev: usize },
    #[error("missing condition: model expects a conditioning image")]
    MissingCondition,
    #[error("incompatible shape: {0}")]
    IncompatibleShape(String),
    #[error("indivisible dimensions: {height}x{width} by scale {scale}")]
    IndivisibleDimensions {
        height: usize,
        width: usize,
        scale: usize,
    },
    #[error("image too small: {height}x{width}, need at least {min}x{min}")]
    TooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("divergence at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: usize, loss: f64 },
    #[error("non-finite state at step t = {0}")]
    NonFiniteState(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
