use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdError {
    #[error("grid spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("stencil needs {expected} offsets, got {got}")]
    StencilSize { expected: usize, got: usize },
    #[error("moment matrix is singular (duplicate offsets)")]
    DegenerateGrid,
    #[error("only first and second derivatives are supported, got order {0}")]
    UnsupportedOrder(usize),
    #[error("series needs at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("sample times must be strictly increasing (step {0})")]
    NotIncreasing(f64),
    #[error("series has {rows} rows but {times} sample times")]
    RowMismatch { rows: usize, times: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),
    #[error("parameter/gradient count mismatch: {params} vs {grads}")]
    ParamCount { params: usize, grads: usize },
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Self::Shape { op, lhs, rhs }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("derivative index {index} out of range for a stack of {k} autoencoders")]
    Index { index: usize, k: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("latent integration diverged at step {step}")]
    Divergence { step: usize },
    #[error("convex weights must be non-negative and sum to 1, got ({0}, {1})")]
    ConvexWeights(f64, f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Fd(#[from] FdError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss term {term} is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("degenerate (constant) series for parameter {param}, derivative {order}")]
    DegenerateSeries { param: usize, order: usize },
    #[error("rollout diverged for parameter {param}, frame {frame}")]
    Divergence { param: usize, frame: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<AutodiffError> for LossError {
    fn from(e: AutodiffError) -> Self {
        LossError::Model(e.into())
    }
}

impl From<FdError> for LossError {
    fn from(e: FdError) -> Self {
        LossError::Model(e.into())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("need at least 2 distinct training inputs, got {0}")]
    TooFewPoints(usize),
    #[error("duplicate inputs with conflicting targets")]
    Conditioning,
    #[error("kernel matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite training target")]
    NonFiniteTarget,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FomError {
    #[error("stability condition violated: {0}")]
    Stability(String),
    #[error("observation index {index} out of range for {len} grid points")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid problem setup: {0}")]
    Setup(String),
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("malformed container: {0}")]
    Format(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing dataset: {0}")]
    MissingDataset(String),
    #[error("training aborted at epoch {epoch}: {source}")]
    Training { epoch: usize, source: LossError },
    #[error("non-finite gradient at epoch {epoch}")]
    NonFiniteGradient { epoch: usize },
    #[error("inference diverged for parameter {theta:?} at step {step}")]
    InferenceDivergence { theta: Vec<f64>, step: usize },
    #[error("truth channel has zero standard deviation")]
    DegenerateTruth,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Fom(#[from] FomError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl PipelineError {
    /// Short machine-readable category, used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::MissingDataset(_) => "dataset",
            PipelineError::Training { .. } | PipelineError::NonFiniteGradient { .. } => "training",
            PipelineError::InferenceDivergence { .. } => "divergence",
            PipelineError::DegenerateTruth | PipelineError::Shape(_) => "evaluation",
            PipelineError::Loss(_) | PipelineError::Model(_) => "model",
            PipelineError::Gp(_) => "gp",
            PipelineError::Fom(_) => "fom",
            PipelineError::Io(_) => "io",
        }
    }
}
