use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("negative entry {value} at row {row}, column {col}")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("row {row} sums to zero")]
    ZeroRow { row: usize },

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("alpha {0} is outside [-1, 1]")]
    AlphaOutOfRange(f64),

    #[error("composition contains zeros; alpha must be > 0 (got {alpha})")]
    ZeroWithNonpositiveAlpha { alpha: f64 },

    #[error("log-ratio transform of a composition with a zero at row {row}")]
    ZeroWithLogRatio { row: usize },

    #[error("scores at row {row} fall outside the image of the alpha-transformation")]
    OutOfImage { row: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite residual or Jacobian at theta = {theta:?}")]
    NonFiniteResidual { theta: Vec<f64> },

    #[error("normal equations are singular even at damping {damping:e}")]
    SingularNormalEquations { damping: f64 },

    #[error("negative weight {value} at residual {index}")]
    NegativeWeight { index: usize, value: f64 },

    #[error("invalid options: {0}")]
    InvalidOptions(String),

    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    OutOfRangeCoordinate { lat: f64, lon: f64 },

    #[error("invalid neighbour count k = {k} for {n} locations")]
    InvalidK { k: usize, n: usize },

    #[error("bandwidth must be positive (got {0})")]
    NonpositiveBandwidth(f64),

    #[error("all kernel weights except the focal one vanish at location {location}")]
    DegenerateWeights { location: usize },

    #[error("marginal effects are not defined for the intercept")]
    InterceptEffectRequested,

    #[error("covariate index {k} out of range (p = {p})")]
    CovariateOutOfRange { k: usize, p: usize },

    #[error("H is numerically singular (condition number {condition:e})")]
    SingularH { condition: f64 },

    #[error("covariance has a negative eigenvalue {0:e}")]
    NotPositiveSemidefinite(f64),

    #[error("{failed} of {total} bootstrap replicates failed")]
    BootstrapFailures { failed: usize, total: usize },

    #[error("shape mismatch: observed {observed:?}, fitted {fitted:?}")]
    ShapeMismatch {
        observed: (usize, usize),
        fitted: (usize, usize),
    },

    #[error("fitted composition has a non-positive entry at row {row}, column {col}")]
    NonpositiveFitted { row: usize, col: usize },

    #[error("all locations coincide")]
    AllCoincident,

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric cell `{value}` at row {row}, column `{column}`")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse grouping used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            InvalidOptions(_) | InvalidParameters(_) | AlphaOutOfRange(_) | InvalidK { .. }
            | NonpositiveBandwidth(_) | InterceptEffectRequested
            | CovariateOutOfRange { .. } => ErrorKind::Usage,
            NonFiniteResidual { .. }
            | SingularNormalEquations { .. }
            | DegenerateWeights { .. }
            | SingularH { .. }
            | NotPositiveSemidefinite(_)
            | BootstrapFailures { .. }
            | OutOfImage { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}
