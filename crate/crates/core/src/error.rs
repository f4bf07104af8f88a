use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is singular: pivot {pivot:e} at column {column} is below tolerance")]
    SingularMatrix { column: usize, pivot: f64 },

    #[error("{what} did not converge within {iterations} iterations")]
    ConvergenceFailure { what: &'static str, iterations: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("empty sequence set")]
    EmptySequenceSet,

    #[error("sequence of length {len} is shorter than n-gram order {order}")]
    SequenceTooShort { len: usize, order: usize },

    #[error("precondition violated: {0}")]
    PreconditionViolated(Precondition),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("distribution has no support left after masking")]
    DegenerateSupport,

    #[error("invalid transform spec {spec:?}: {reason}")]
    InvalidTransform { spec: String, reason: String },

    #[error("gamma must lie in (0, 1], got {0}")]
    InvalidGamma(f64),

    #[error("delta^2 = {delta_sq} must be below 1/n = {limit}")]
    InvalidDelta { delta_sq: f64, limit: f64 },

    #[error("malformed markers: {0}")]
    MalformedMarkers(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid UTF-8 in {path} at byte offset {offset}")]
    Encoding { path: PathBuf, offset: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("merge table type mismatch: expected {expected}, found {found}")]
    TypeMismatch { expected: String, found: String },
}

/// A theory-level precondition that did not hold, together with the measured
/// quantities that decided it.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Precondition {
    /// `zeta * n > rho(B^2)` is required for the ARP series to converge.
    SpectralRadius { zeta_n: f64, rho: f64 },
    /// The spectral radius could not be computed to tolerance.
    SpectralRadiusUnverified { zeta_n: f64 },
    /// `zeta * n * I - B^2` is singular to working precision.
    SingularShift { zeta_n: f64, sigma_min: f64 },
    /// Row or column diagonal dominance of `zeta * n * I - B^2` fails at `row`.
    DiagonalDominance { row: usize, form: DominanceForm, margin: f64 },
    /// The inflow/outflow denominator is not positive.
    NonPositiveDenominator { denominator: f64 },
    /// The concentration bound requires `zeta * n > 4`.
    BranchingTooLow { zeta_n: f64 },
    /// The concentration bound requires every column square-sum of B below 1.
    ColumnSquareSum { column: usize, value: f64 },
    /// The concentration checks are only meaningful on unconstrained perturbations.
    ProjectedMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DominanceForm {
    Row,
    Column,
}

impl std::fmt::Display for Precondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precondition::SpectralRadius { zeta_n, rho } => {
                write!(f, "zeta*n = {zeta_n} does not exceed rho(B^2) = {rho}")
            }
            Precondition::SpectralRadiusUnverified { zeta_n } => {
                write!(f, "rho(B^2) could not be computed; zeta*n = {zeta_n} unverifiable")
            }
            Precondition::SingularShift { zeta_n, sigma_min } => {
                write!(f, "zeta*n*I - B^2 is singular (zeta*n = {zeta_n}, sigma_min = {sigma_min})")
            }
            Precondition::DiagonalDominance { row, form, margin } => {
                write!(f, "zeta*n*I - B^2 is not diagonally dominant ({form:?} form) at row {row}, margin {margin}")
            }
            Precondition::NonPositiveDenominator { denominator } => {
                write!(f, "inflow/outflow denominator {denominator} is not positive")
            }
            Precondition::BranchingTooLow { zeta_n } => {
                write!(f, "zeta*n = {zeta_n} must exceed 4")
            }
            Precondition::ColumnSquareSum { column, value } => {
                write!(f, "sum_i B_ij^2 = {value} is not below 1 at column {column}")
            }
            Precondition::ProjectedMode => {
                write!(f, "projected perturbations do not have controlled moments")
            }
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
