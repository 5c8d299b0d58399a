use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error(
        "{op}: {axis} extent {extent} is not divisible by {factor}; \
         pad or crop the input to a multiple of {factor}"
    )]
    Indivisible {
        op: &'static str,
        axis: &'static str,
        extent: usize,
        factor: usize,
    },

    #[error("{op}: head count {heads} does not divide channel count {channels}")]
    HeadDivisibility {
        op: &'static str,
        channels: usize,
        heads: usize,
    },

    #[error("batch norm running statistics are uninitialized; run a training-mode pass before eval")]
    UninitializedStats,

    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),

    #[error("{op} expects {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("undefined test: {0}")]
    UndefinedTest(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(detail: impl Into<String>) -> Self {
        Error::Format(detail.into())
    }
}
