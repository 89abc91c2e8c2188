use thiserror::Error;

use crate::autodiff::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("backward: output must be a scalar, got shape {0}")]
    NotScalar(Shape),

    #[error("backward: handle {0} is not on this tape")]
    ForeignHandle(usize),

    #[error("tensor data length {len} does not match shape {shape}")]
    DataLength { shape: Shape, len: usize },

    #[error("{what} must lie strictly inside (0, 1), got {value}")]
    OutOfUnitInterval { what: &'static str, value: f64 },

    #[error("invalid probability vector: {0}")]
    InvalidSimplex(String),

    #[error("invalid one-hot vector: {0}")]
    InvalidOneHot(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("finite difference: objective returned non-finite value at coordinate {coord}")]
    NonFiniteObjective { coord: usize },

    #[error("{estimator}: non-finite {what}")]
    NonFiniteEstimate {
        estimator: &'static str,
        what: &'static str,
    },

    #[error("enumeration over {outcomes} outcomes exceeds the cap of {cap}")]
    OutcomeOverflow { outcomes: u128, cap: u128 },

    #[error("quadrature did not converge: doubling points changed the result by {delta:e}")]
    QuadratureNotConverged { delta: f64 },

    #[error("optimizer: non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    #[error("{0}")]
    Unsupported(String),
}
