use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose extents must agree do not.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("image of {height}x{width} is not divisible into {patch}x{patch} patches")]
    Divisibility {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    /// A caller broke an API precondition (non-scalar loss, missing gradient, empty dataset).
    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
