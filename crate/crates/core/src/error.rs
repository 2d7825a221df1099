use std::io;

use thiserror::Error;

use crate::lattice::GridSpec;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {left:?} vs {right:?}")]
    GridMismatch { left: GridSpec, right: GridSpec },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("radius {radius} out of bounds (limit {limit})")]
    RadiusOutOfBounds { radius: f64, limit: f64 },

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("right-hand side has nonzero mean {mean:e} (norm {norm:e})")]
    NonzeroMean { mean: f64, norm: f64 },

    #[error("degenerate Gram matrix (condition number {condition:e})")]
    DegenerateGram { condition: f64 },

    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("all {0} ensemble members failed")]
    EnsembleFailed(usize),

    #[error("bad field file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_same_grid(left: &GridSpec, right: &GridSpec) -> Result<()> {
    if left != right {
        return Err(Error::GridMismatch {
            left: *left,
            right: *right,
        });
    }
    Ok(())
}
