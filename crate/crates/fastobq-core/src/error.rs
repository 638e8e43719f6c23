//! Failure modes of the numerical core. Anything that is a caller bug
//! (out-of-range index, mismatched buffer length) panics instead.

use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An input tensor contains NaN or an infinity.
    NonFinite,
    /// The calibration matrix has zero sample columns.
    EmptyCalibration,
    /// Cholesky factorization found a non-positive pivot at this column;
    /// the (damped) Hessian is not positive definite.
    NotPositiveDefinite { pivot: usize },
    /// The index was already quantized and removed from the live set.
    DeadIndex { index: usize },
    /// An inverse-Hessian diagonal entry is too small to divide by.
    SingularPivot { index: usize, value: f64 },
    /// Operand shapes disagree.
    ShapeMismatch { context: &'static str },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonFinite => write!(f, "input contains a non-finite value"),
            Error::EmptyCalibration => write!(f, "calibration set has no samples"),
            Error::NotPositiveDefinite { pivot } => {
                write!(f, "matrix is not positive definite (pivot {pivot})")
            }
            Error::DeadIndex { index } => {
                write!(f, "index {index} was already quantized")
            }
            Error::SingularPivot { index, value } => {
                write!(f, "inverse-Hessian pivot {index} is singular ({value:e})")
            }
            Error::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
