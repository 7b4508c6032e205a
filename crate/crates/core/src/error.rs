use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: expected {expected}, got {got}")]
    Shape {
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("{what} = {got} out of range (valid: 0..{len})")]
    OutOfRange {
        what: &'static str,
        got: usize,
        len: usize,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("container format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(axis: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { axis, expected, got })
    }
}
