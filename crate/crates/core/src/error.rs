use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variants carry enough context (offsets, counts, eigenvalues) to be
/// rendered as a machine-readable error object by the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad magic bytes at offset {offset}: expected \"OODT\"")]
    MagicMismatch { offset: usize },
    #[error("malformed header at offset {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("payload truncated at offset {offset}: need {expected} bytes, found {found}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at element offset {offset}")]
    NonFiniteValue { offset: usize },
    #[error("invalid tensor shape: {0}")]
    InvalidShape(String),
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error at line {line}: {reason}")]
    CsvParse { line: usize, reason: String },
    #[error("degenerate synthetic spec: {0}")]
    DegenerateSpec(String),

    #[error("need at least 2 classes, got {0}")]
    SingleClass(usize),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("class {class} has {count} samples; at least {required} required")]
    EmptyClass {
        class: usize,
        count: usize,
        required: usize,
    },
    #[error(
        "covariance is not symmetric positive definite (smallest eigenvalue {min_eigenvalue:e})"
    )]
    SingularCovariance { min_eigenvalue: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("only {positive} positive eigenvalues, subspace of dimension {requested} requested")]
    RankDeficient { positive: usize, requested: usize },
    #[error("training residuals vanish; residual scale undefined")]
    DegenerateResidual,
    #[error("constituent score `{0}` has zero variance on the reference split")]
    ZeroVariance(&'static str),
    #[error("invalid shrinkage {0}; must lie in [0, 1]")]
    BadShrinkage(f64),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("TPR target {0} outside (0, 1]")]
    BadTarget(f64),

    #[error("too few samples: {what} has {found}, need at least {required}")]
    TooFewSamples {
        what: &'static str,
        found: usize,
        required: usize,
    },
    #[error("optimizer hit {iterations} iterations with gradient norm {grad_norm:e}")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("no k in the grid is below the feature dimension {dim}")]
    EmptyGrid { dim: usize },
    #[error("need at least 2 OOD sets, got {0}")]
    TooFewSets(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch} (non-finite loss or parameters)")]
    DivergenceDetected { epoch: usize },
    #[error("network was not trained with an extra OOD class")]
    NotKPlus1Model,
    #[error("invalid training config: {0}")]
    BadTrainConfig(String),

    #[error("Hessian not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    HessianNotPD { min_eigenvalue: f64 },
    #[error("need at least {required} Monte Carlo draws, got {found}")]
    TooFewDraws { found: usize, required: usize },

    #[error("invalid mixture weights: {0}")]
    BadWeights(String),
    #[error("invalid grid: {0}")]
    BadGrid(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MagicMismatch { .. } => "MagicMismatch",
            Error::MalformedHeader { .. } => "MalformedHeader",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::InvalidShape(_) => "InvalidShape",
            Error::IoFailure { .. } => "IoFailure",
            Error::CsvParse { .. } => "CsvParse",
            Error::DegenerateSpec(_) => "DegenerateSpec",
            Error::SingleClass(_) => "SingleClass",
            Error::NonPositiveTemperature(_) => "NonPositiveTemperature",
            Error::EmptyClass { .. } => "EmptyClass",
            Error::SingularCovariance { .. } => "SingularCovariance",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::RankDeficient { .. } => "RankDeficient",
            Error::DegenerateResidual => "DegenerateResidual",
            Error::ZeroVariance(_) => "ZeroVariance",
            Error::BadShrinkage(_) => "BadShrinkage",
            Error::EmptyInput(_) => "EmptyInput",
            Error::BadTarget(_) => "BadTarget",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::NonConvergence { .. } => "NonConvergence",
            Error::EmptyGrid { .. } => "EmptyGrid",
            Error::TooFewSets(_) => "TooFewSets",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DivergenceDetected { .. } => "DivergenceDetected",
            Error::NotKPlus1Model => "NotKPlus1Model",
            Error::BadTrainConfig(_) => "BadTrainConfig",
            Error::HessianNotPD { .. } => "HessianNotPD",
            Error::TooFewDraws { .. } => "TooFewDraws",
            Error::BadWeights(_) => "BadWeights",
            Error::BadGrid(_) => "BadGrid",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::Json(_) => "Json",
        }
    }

    /// Whether the error stems from input data rather than configuration or
    /// a method's numerics. Drives the CLI exit code.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MagicMismatch { .. }
                | Error::MalformedHeader { .. }
                | Error::TruncatedPayload { .. }
                | Error::NonFiniteValue { .. }
                | Error::InvalidShape(_)
                | Error::IoFailure { .. }
                | Error::CsvParse { .. }
                | Error::DegenerateSpec(_)
                | Error::EmptyInput(_)
                | Error::DimensionMismatch { .. }
                | Error::ShapeMismatch(_)
        )
    }
}
