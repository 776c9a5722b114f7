use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("evaluation at {point:?} lies on the singular set ({what})")]
    OnSingularSet { point: Vec<f64>, what: &'static str },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("laplacian of the integrand is unbounded at infinity: {0}")]
    UnboundedAtInfinity(String),

    #[error("divergent integral: {0}")]
    DivergentIntegral(String),

    #[error("Osgood condition fails: {0}")]
    OsgoodFails(String),

    #[error("value {value} outside table range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("table is not monotone: {0}")]
    NotMonotone(String),

    #[error("node {0} is too close to the boundary")]
    BoundaryNode(usize),

    #[error("degenerate quadratic fit at node {0}")]
    DegenerateFit(usize),

    #[error("test function support touches the boundary at node {0}")]
    SupportTouchesBoundary(usize),

    #[error("kernel has no flatness profile (classical kernel)")]
    NonFlatKernel,

    #[error("malformed grid file: {0}")]
    GridFormat(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
