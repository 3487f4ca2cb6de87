use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("sequence needs {len} positions but max_seq_len is {max}")]
    Length { len: usize, max: usize },

    #[error("rank {rank} exceeds projection dims {d_in}x{d_out}")]
    Rank { rank: usize, d_in: usize, d_out: usize },

    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    /// A training example that cannot contribute any supervised position.
    #[error("degenerate example: {0}")]
    DegenerateExample(&'static str),

    #[error("adapter does not fit this model: {0}")]
    AdapterMismatch(String),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{kind} {id} not found")]
    NotFound { kind: &'static str, id: String },
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }
}
