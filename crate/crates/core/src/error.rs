use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("quantization step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("quantizer gradient requested before quantize was evaluated")]
    QuantizeNotEvaluated,
    #[error("model carries no quantization attachments")]
    NotQuantized,
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("accuracy is undefined for a regression task")]
    AccuracyUndefined,
    #[error("operation requires a mean-square-error model: {0}")]
    NotMse(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::UnboundInput(_) => "unbound_input",
            Error::BackwardBeforeForward => "backward_before_forward",
            Error::InvalidShape(_) => "invalid_shape",
            Error::InvalidArch(_) => "invalid_arch",
            Error::NonPositiveStep(_) => "non_positive_step",
            Error::QuantizeNotEvaluated => "quantize_not_evaluated",
            Error::NotQuantized => "not_quantized",
            Error::InvalidBudget(_) => "invalid_budget",
            Error::AccuracyUndefined => "accuracy_undefined",
            Error::NotMse(_) => "not_mse",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Diverged { .. } => "diverged",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
