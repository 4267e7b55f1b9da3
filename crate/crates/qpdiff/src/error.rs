use thiserror::Error;

/// Errors surfaced by problem construction, the solvers and the backward engines.
#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("inverted bounds at index {index}: l = {lower} > u = {upper}")]
    BoundsInverted {
        index: usize,
        lower: f64,
        upper: f64,
    },
    #[error("Q is asymmetric beyond tolerance (relative asymmetry {rel:.3e})")]
    AsymmetricQ { rel: f64 },
    #[error("singular KKT matrix: A rank-deficient or Q + rho*I not positive definite")]
    SingularKkt,
    #[error("singular backward system (degenerate active set)")]
    SingularBackwardSystem,
    #[error("solution trace required for unrolled differentiation but not recorded")]
    MissingTrace,
    #[error("active-set cycle detected in reference solver")]
    CyclingDetected,
    #[error("degenerate risk: z'Qz is not strictly positive")]
    DegenerateRisk,
    #[error("max-Sharpe recast infeasible: predicted returns have no positive entry")]
    InfeasibleRecast,
    #[error("cannot normalize weights: sum of entries is zero")]
    ZeroSum,
    #[error("residual variances must be strictly positive")]
    NonPositiveResidualVariance,
    #[error("feature matrix is rank deficient")]
    RankDeficientFeatures,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QpError>;
