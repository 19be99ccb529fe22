use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite entry in row {row}")]
    NonFinite { row: usize },

    #[error("volume axis {axis} has {len} voxels but the scale {sigma} kernel needs more than {radius}")]
    VolumeTooSmall {
        axis: usize,
        len: usize,
        sigma: f64,
        radius: usize,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user-supplied inputs or settings (CLI exit code 2).
    pub fn is_configuration(&self) -> bool {
        !matches!(self, Error::Convergence { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
