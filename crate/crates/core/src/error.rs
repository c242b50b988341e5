use thiserror::Error;

/// Errors produced by the HODLR toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid HODLR structure: {0}")]
    Structure(String),

    /// The operator promised exact HODLR(k) structure but the sketches say otherwise.
    #[error("operator is not HODLR({k}): level {level} residual {residual:.3e} exceeds threshold")]
    StructureViolation { k: usize, level: usize, residual: f64 },

    #[error("bound not applicable: {0}")]
    BoundInapplicable(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("size guard exceeded: {0}")]
    SizeGuard(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
