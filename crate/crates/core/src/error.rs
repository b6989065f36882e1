use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes or lengths do not agree.
    Shape(String),
    /// A configuration value violates its invariant.
    Config(String),
    /// A numeric parameter is out of its admissible range.
    Parameter(String),
    /// Input shorter than the operation requires.
    InputTooShort { needed: usize, got: usize },
    /// Input length is not a multiple of the required alignment.
    Alignment { len: usize, multiple: usize },
    /// A code index is outside its codebook.
    CorruptCode { row: usize, col: usize, index: usize, size: usize },
    /// A forward pass produced NaN/Inf; `op` names the first offending primitive.
    NonFinite { op: &'static str, node: usize },
    /// Function evaluation failed during a gradient check.
    Evaluation(String),
    /// Sequence exceeds the model's maximum length.
    Sequence { len: usize, max: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Parameter(m) => write!(f, "parameter error: {m}"),
            Error::InputTooShort { needed, got } => {
                write!(f, "input too short: need {needed} samples, got {got}")
            }
            Error::Alignment { len, multiple } => {
                write!(f, "length {len} is not a multiple of {multiple}")
            }
            Error::CorruptCode { row, col, index, size } => write!(
                f,
                "corrupt code at ({row}, {col}): index {index} outside codebook of size {size}"
            ),
            Error::NonFinite { op, node } => {
                write!(f, "non-finite value produced by `{op}` (node {node})")
            }
            Error::Evaluation(m) => write!(f, "evaluation error: {m}"),
            Error::Sequence { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
        }
    }
}

impl core::error::Error for Error {}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
