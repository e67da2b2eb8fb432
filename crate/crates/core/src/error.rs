//! Error types shared across the crate.

use std::fmt;

/// Identifies which pre-array factorization failed inside a filter step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreArrayKind {
    /// Innovation-covariance factorization of the measurement update.
    InnovationFactor,
    /// Posterior-covariance factorization of the measurement update.
    PosteriorFactor,
    /// Prior-covariance factorization of the time update.
    TimeUpdate,
}

impl fmt::Display for PreArrayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PreArrayKind::InnovationFactor => write!(f, "innovation-factor pre-array"),
            PreArrayKind::PosteriorFactor => write!(f, "posterior-factor pre-array"),
            PreArrayKind::TimeUpdate => write!(f, "time-update pre-array"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Matrix or vector dimensions do not match what the operation requires.
    ShapeMismatch(String),
    /// A pre-array is numerically rank deficient.
    RankDeficient { sigma_min: f64, sigma_max: f64 },
    /// Two singular values coincide and the factor-derivative system is not solvable.
    DegenerateSingularValues { gap: f64, tol: f64 },
    /// A matrix required to be symmetric is not.
    NotSymmetric { asymmetry: f64 },
    /// A matrix required to be positive semi-definite has a significantly negative eigenvalue.
    NotPsd { min_eigenvalue: f64 },
    /// A matrix required to be positive definite is not.
    NotPd(&'static str),
    /// Supplied covariance factors do not reconstruct the covariance they claim to factor.
    InconsistentFactors { residual: f64 },
    /// The innovation covariance cannot be inverted at the given filter step.
    SingularInnovationCovariance { step: usize },
    /// A diagonal factor contains a zero entry and cannot be inverted.
    ZeroSingularValue,
    /// A state or covariance quantity became NaN or infinite; the run is failed.
    NonFiniteState { step: usize },
    /// The iterative SVD backend did not converge.
    NumericalFailure(&'static str),
    /// An error raised by a specific pre-array factorization of a filter step.
    AtStep {
        step: usize,
        array: PreArrayKind,
        source: Box<Error>,
    },
    /// Model or sweep configuration could not be parsed.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::RankDeficient { sigma_min, sigma_max } => write!(
                f,
                "pre-array is rank deficient (sigma_min={sigma_min:.3e}, sigma_max={sigma_max:.3e})"
            ),
            Error::DegenerateSingularValues { gap, tol } => write!(
                f,
                "singular values too close (gap={gap:.3e}, tolerance={tol:.3e})"
            ),
            Error::NotSymmetric { asymmetry } => {
                write!(f, "matrix is not symmetric (max asymmetry {asymmetry:.3e})")
            }
            Error::NotPsd { min_eigenvalue } => write!(
                f,
                "matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:.3e})"
            ),
            Error::NotPd(what) => write!(f, "{what} is not positive definite"),
            Error::InconsistentFactors { residual } => write!(
                f,
                "analytic factors do not reconstruct the covariance (residual {residual:.3e})"
            ),
            Error::SingularInnovationCovariance { step } => {
                write!(f, "innovation covariance is singular at step {step}")
            }
            Error::ZeroSingularValue => write!(f, "diagonal factor has a zero entry"),
            Error::NonFiniteState { step } => {
                write!(f, "non-finite state or covariance at step {step}")
            }
            Error::NumericalFailure(what) => write!(f, "numerical failure: {what}"),
            Error::AtStep { step, array, source } => {
                write!(f, "step {step}, {array}: {source}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::AtStep { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
