//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MixregError>;

#[derive(Debug, Clone, Error)]
pub enum MixregError {
    /// Matrix or sample-size requirements are not met.
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    /// A configuration value is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Input data violates a structural invariant (non-finite entries,
    /// missing intercept column, constant predictor, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// The scatter matrix of the best MCD subset is (numerically) singular.
    #[error("degenerate scatter: {0}")]
    DegenerateScatter(String),

    /// A mixture component lost all mass or its weighted Gram matrix became
    /// ill-conditioned during an update.
    #[error("component {component} collapsed: {reason}")]
    ComponentCollapse { component: usize, reason: String },

    /// No admissible random partition could be drawn for an EM start.
    #[error("initialization failed: {0}")]
    InitializationFailed(String),

    /// Every EM start failed; the per-start causes are preserved.
    #[error("fit failed: all starts collapsed ({})", causes.join("; "))]
    FitFailed { causes: Vec<String> },

    /// The sandwich covariance is not computable at the fitted parameters.
    #[error("covariance not identifiable at fit: {0}")]
    NonIdentifiable(String),

    /// Every replication failed for one of the estimators in a plan.
    #[error("simulation plan failed for estimator {estimator}: {reason}")]
    PlanFailed { estimator: String, reason: String },
}
