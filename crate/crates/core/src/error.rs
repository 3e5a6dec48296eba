use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    // trajectory logs
    #[error("malformed line {0}: {1}")]
    MalformedLine(usize, String),
    #[error("schema violation: missing or invalid field `{0}`")]
    SchemaViolation(String),
    #[error("duplicate run {run_index} for task {task_id}")]
    DuplicateRun { task_id: String, run_index: usize },

    // embeddings
    #[error("embedding service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector prefix has (near) zero norm")]
    ZeroVector,
    #[error("corrupt cache file at byte offset {0}")]
    CorruptCacheFile(u64),
    #[error("no cached embedding for text {0:?}")]
    MissingEmbedding(String),
    #[error("invalid target dimension {d_target} for vector of length {len}")]
    InvalidTargetDim { d_target: usize, len: usize },

    // tensors and fitting
    #[error("tensor has no slices")]
    EmptyTensor,
    #[error("rank {rank} infeasible (feature dim {d}, longest slice {max_rows})")]
    InfeasibleRank { rank: usize, d: usize, max_rows: usize },
    #[error("factor shapes do not match tensor: {0}")]
    ShapeMismatch(String),
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
    #[error("component {component} out of range for rank {rank}")]
    MissingComponent { component: usize, rank: usize },

    // baselines
    #[error("agreement matrix row {0} has zero degree")]
    SingularDegree(usize),
    #[error("invalid agreement matrix: {0}")]
    InvalidAgreement(String),

    // evaluation
    #[error("labels contain only one class")]
    DegenerateLabels,
    #[error("score and label task sets do not overlap")]
    NoOverlap,
    #[error("task {0} has no backbone candidates")]
    EmptyCandidates(usize),

    // synthetic
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NumericalBreakdown(_) => ErrorClass::Numerical,
            Error::InvalidInput(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
