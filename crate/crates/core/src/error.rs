use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("duplicate site id `{0}`")]
    DuplicateSite(String),

    #[error("column `{0}` has zero variance")]
    ZeroVariance(String),

    #[error("parameter outside its domain: {0}")]
    Domain(String),

    /// The information matrix (or REML determinant argument) is numerically singular.
    #[error("singular design: condition estimate {condition:.3e}")]
    Singular { condition: f64 },

    #[error(
        "REML refused on privatized summaries: the restricted-likelihood determinant term \
         is numerically unstable under Gaussian perturbation (determinant amplification)"
    )]
    RemlOnPrivatized,

    #[error("summary for site `{0}` is already privatized")]
    AlreadyPrivatized(String),

    #[error("p = {p} exceeds the pattern-enumeration capacity p_max = {p_max}")]
    Capacity { p: usize, p_max: usize },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error comes from the numerics rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Singular { .. })
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
