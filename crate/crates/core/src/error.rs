use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("dtype mismatch: {left} vs {right}")]
    DtypeMismatch { left: String, right: String },
    #[error("tensor is empty")]
    EmptyTensor,
    #[error("empty input")]
    EmptyInput,
    #[error("quantile level {0} outside [0, 1]")]
    InvalidP(f64),
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("invalid meta: {0}")]
    InvalidMeta(String),
    #[error("mask tensor `{0}` holds a value other than 0 or 1")]
    InvalidMask(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("overlapping or non-contiguous data offsets at `{0}`")]
    OffsetOverlap(String),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("non-finite value in `{0}`")]
    NonFiniteValue(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("task vectors come from different pretrained bases: {0} vs {1}")]
    BaseMismatch(String, String),
    #[error("at least two tasks are required, got {0}")]
    TooFewTasks(usize),
    #[error("importance map for task `{0}` is not normalized")]
    NotNormalized(String),
    #[error("importance map for task `{0}` is already normalized")]
    AlreadyNormalized(String),
    #[error("layer `{0}` has no elements")]
    EmptyLayer(String),
    #[error("sample batch is empty")]
    EmptyBatch,
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("drop rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
}

impl Error {
    /// Process exit code for the command-line tool.
    ///
    /// 2 usage, 3 I/O, 4 compatibility, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::ShapeMismatch { .. }
            | Error::DtypeMismatch { .. }
            | Error::SchemaMismatch(_)
            | Error::BaseMismatch(..)
            | Error::InvalidMeta(_)
            | Error::InvalidMask(_)
            | Error::CorruptHeader(_)
            | Error::OffsetOverlap(_)
            | Error::TruncatedPayload { .. }
            | Error::NotNormalized(_)
            | Error::AlreadyNormalized(_) => 4,
            Error::NonFiniteValue(_) | Error::EmptyTensor | Error::EmptyLayer(_) => 5,
            Error::EmptyInput
            | Error::InvalidP(_)
            | Error::InvalidShape { .. }
            | Error::TooFewTasks(_)
            | Error::EmptyBatch
            | Error::InvalidSpec(_)
            | Error::InvalidHyper(_)
            | Error::InvalidRate(_)
            | Error::UnknownMetric(_) => 2,
        }
    }
}
