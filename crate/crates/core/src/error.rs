use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("gaze point {index}: {field}={value} outside [{min}, {max}]")]
    FieldOutOfRange {
        index: usize,
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("gaze window must hold exactly {expected} points, got {found}")]
    WindowLength { expected: usize, found: usize },
    #[error("timestamps must be strictly increasing (point {index})")]
    NonMonotonicTime { index: usize },
    #[error("scanpath needs at least {needed} points, got {found}")]
    TooShort { needed: usize, found: usize },
    #[error("image {width}x{height}: {reason}")]
    ImageDims {
        width: usize,
        height: usize,
        reason: &'static str,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{0}: zero variance")]
    DegenerateVariance(&'static str),
    #[error("function is not deterministic (coordinate {coordinate} differs between forward passes)")]
    NonDeterministic { coordinate: usize },
    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    Diverged { epoch: usize, step: usize },
    #[error("unknown scene '{0}'")]
    UnknownScene(String),
}
