//! Error types for the solver pipeline.

use thiserror::Error;

/// Failure modes surfaced by the library.
///
/// [`Error::category`] groups variants the way callers usually branch on
/// them: input problems, structural non-controllability, and numerical
/// breakdown.
#[derive(Debug, Error)]
pub enum Error {
    /// The problem document could not be parsed.
    #[error("failed to parse problem document: {0}")]
    Parse(String),

    /// A matrix or vector in the document has the wrong shape.
    #[error("dimension mismatch in `{field}`: expected {expected}, got {got}")]
    DimensionMismatch {
        field: String,
        expected: String,
        got: String,
    },

    /// A required field is absent.
    #[error("missing field `{0}` in problem document")]
    MissingField(String),

    /// The problem failed validation; the report carries the details.
    #[error("problem validation failed: {0}")]
    Invalid(String),

    /// `D` lost full row rank on some segment, so no factorisation
    /// `D M = [I 0]` exists there.
    #[error(
        "D is rank deficient on segment {segment}: sigma_min/sigma_max = {ratio:.3e}"
    )]
    RankDeficientD { segment: usize, ratio: f64 },

    /// The Riccati integration produced entries beyond the overflow guard.
    #[error("Riccati solution blew up at t = {t:.6}: max entry {max_entry:.3e}")]
    RiccatiBlowup { t: f64, max_entry: f64 },

    /// A matrix that must stay symmetric drifted beyond tolerance.
    #[error("symmetry residual {residual:.3e} exceeds {tolerance:.1e} at t = {t:.6}")]
    NonSymmetric {
        t: f64,
        residual: f64,
        tolerance: f64,
    },

    /// `D' P D + R` stopped being positive definite in the LQ sweep.
    #[error("feedback weight D'PD + R is not positive definite at t = {t:.6}")]
    GainSingular { t: f64 },

    /// The system cannot be steered to an arbitrary terminal variable.
    #[error("system is not exactly controllable: min eigenvalue of Pbar(0) = {margin:.3e}")]
    NotControllable { margin: f64 },

    /// The tree-discretised steering problem has no feasible control.
    #[error("tree problem infeasible: constraint violation {violation:.3e} at {location}")]
    Infeasible { violation: f64, location: String },

    /// A linear system inside a solver was singular.
    #[error("singular linear system in {context}")]
    SingularSystem { context: String },

    /// A control pair handed to a verification routine does not reach the
    /// target within the stated tolerance.
    #[error(
        "control pair is not admissible: terminal mean-square error {mse:.3e} exceeds {tolerance:.3e}"
    )]
    NotAdmissible { mse: f64, tolerance: f64 },

    /// Generic numerical failure with context.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// I/O failure while reading a problem document.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad input: parse errors, shape errors, validation failures.
    InvalidInput,
    /// Structural obstruction: not controllable / infeasible tree.
    NotControllable,
    /// Numerical breakdown inside a solver.
    Numerical,
}

impl Error {
    /// Classifies the error for exit-code mapping.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Parse(_)
            | Error::DimensionMismatch { .. }
            | Error::MissingField(_)
            | Error::Invalid(_)
            | Error::Io(_) => ErrorCategory::InvalidInput,
            Error::NotControllable { .. } | Error::Infeasible { .. } => {
                ErrorCategory::NotControllable
            }
            Error::RankDeficientD { .. }
            | Error::RiccatiBlowup { .. }
            | Error::NonSymmetric { .. }
            | Error::GainSingular { .. }
            | Error::SingularSystem { .. }
            | Error::NotAdmissible { .. }
            | Error::Numeric(_) => ErrorCategory::Numerical,
        }
    }
}
