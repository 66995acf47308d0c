use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("curvature must be positive and finite, got {0}")]
    InvalidCurvature(f64),
    #[error("operands have different curvatures ({0} vs {1})")]
    MixedCurvature(f64, f64),
    #[error("point lies outside the ball: c*|z|^2 = {0} (must be < 1)")]
    OutsideBall(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("empty input")]
    EmptyInput,

    #[error("invalid level counts: {0}")]
    InvalidLevelCounts(String),
    #[error("vertex {0} is not a leaf")]
    NotALeaf(usize),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid hierarchy: {0}")]
    Validation(String),
    #[error("unknown class label {0:?}")]
    UnknownLabel(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("distance collection has zero variance")]
    DegenerateVariance,
    #[error("empty group")]
    EmptyGroup,
    #[error("empty batch")]
    EmptyBatch,
    #[error("need at least 3 vertices (3 pairs) for CPCC, found {0}")]
    InsufficientVertices(usize),
    #[error("row {0} is not unit norm (|u| = {1})")]
    UnnormalizedInput(usize, f64),
    #[error("no anchor in the batch has a same-class partner")]
    ClassWithoutPositive,
    #[error("objective is not differentiable here ({0} clamp/clip events)")]
    NonDifferentiablePoint(u64),

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("matrix does not match the block template: {0}")]
    TemplateMismatch(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("row {0} is zero after centering")]
    DegenerateRow(usize),

    #[error("index {0} out of range for {1} points")]
    IndexOutOfRange(usize, usize),
    #[error("need at least {0} samples, got {1}")]
    TooFewSamples(usize, usize),
    #[error("all points coincide; diameter is zero")]
    ZeroDiameter,
    #[error("covariance is singular even after regularization")]
    SingularAfterRegularization,
    #[error("missing entry for method {method}, dataset {dataset}")]
    MissingEntry { method: usize, dataset: usize },

    #[error("I/O error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
