use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("structure has no solid voxels")]
    EmptyStructure,

    #[error("degenerate geometry: volume fraction {0}")]
    DegenerateGeometry(f64),

    #[error("material redraw limit reached for base E={youngs_modulus}, nu={poisson_ratio}")]
    NonPhysicalBase { youngs_modulus: f64, poisson_ratio: f64 },

    #[error("solver did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },

    #[error("incompressible limit: 1 - 2 nu = {0:.3e}")]
    IncompressibleLimit(f64),

    #[error("invalid sample count {0}")]
    InvalidSampleCount(usize),

    #[error("loss is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),

    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),

    #[error("degenerate interpolation angle (cos = {0})")]
    DegenerateAngle(f64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("loss diverged at epoch {epoch}: {value}")]
    NumericalDivergence { epoch: usize, value: f64 },

    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),

    #[error("latent bounds collapse on dimension {0}")]
    DegenerateBounds(usize),

    #[error("truth values are constant")]
    ConstantTruth,

    #[error("normalization range is zero")]
    ZeroRange,

    #[error("mean is zero")]
    ZeroMean,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
