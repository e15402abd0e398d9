use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("usage: {0}")]
    Usage(String),

    /// Training produced a NaN or infinite loss. Carries the parameter norms
    /// at the moment of failure so collapse can be diagnosed after the fact.
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} \
         (student norm {student_norm:.6e}, teacher norm {teacher_norm:.6e})"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        student_norm: f64,
        teacher_norm: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
