use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by core operations.
///
/// Everything here is a contract violation of some kind; ordinary outcomes
/// that merely carry no probability mass (an infeasible CTC target, an
/// unterminated beam) are modelled as values, not errors.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible; carries both shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A parameter is outside its legal range (e.g. dropout p >= 1).
    InvalidParameter(String),
    /// A non-finite value where the contract requires finite input.
    NonFinite(String),
    /// A caller broke an API precondition.
    Contract(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
