//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A required column or schema entry is missing or malformed.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell could not be parsed with the type its role requires.
    #[error("parse error: {0}")]
    Parse(String),

    /// Input values violate a model-level constraint (e.g. y_i > n_i).
    #[error("domain error: {0}")]
    Domain(String),

    /// Validation found a fatal structural defect in the inputs.
    #[error("validation error: {0}")]
    Validation(String),

    /// A matrix that must be positive definite failed to factorize.
    #[error("singular system in block `{block}`: {detail}")]
    Singular { block: String, detail: String },

    /// A dense oracle path was asked to materialize something too large.
    #[error("dimension {dim} exceeds dense-oracle guard {guard}")]
    DimensionGuard { dim: usize, guard: usize },

    /// Not enough samples for the requested estimator.
    #[error("sample size error: {0}")]
    SampleSize(String),

    /// The operation is only defined under a restriction the input violates
    /// (e.g. K = 2 random-intercept designs).
    #[error("unsupported restriction: {0}")]
    UnsupportedRestriction(String),

    /// Internal bookkeeping was used out of order (e.g. Woodbury factors
    /// read before the owning block was updated this sweep).
    #[error("internal state error: {0}")]
    StaleState(String),

    /// A kernel density estimate over (near-)constant samples.
    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    /// Design generation exhausted its retry budget.
    #[error("design generation failed: {0}")]
    DesignGeneration(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Parse(_) => "parse",
            Error::Domain(_) => "domain",
            Error::Validation(_) => "validation",
            Error::Singular { .. } => "singular",
            Error::DimensionGuard { .. } => "dimension_guard",
            Error::SampleSize(_) => "sample_size",
            Error::UnsupportedRestriction(_) => "unsupported_restriction",
            Error::StaleState(_) => "stale_state",
            Error::DegenerateDensity(_) => "degenerate_density",
            Error::DesignGeneration(_) => "design_generation",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
