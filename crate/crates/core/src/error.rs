use thiserror::Error;

pub type Result<T> = std::result::Result<T, QaError>;

#[derive(Debug, Error)]
pub enum QaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(
        "target accuracy {target} is unachievable (best attainable accuracy {best_accuracy:.4} at coverage {coverage:.4})"
    )]
    UnachievableTarget {
        target: f64,
        best_accuracy: f64,
        coverage: f64,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QaError {
    /// Short machine-readable tag, used in CLI and HTTP error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            QaError::Dimension(_) => "dimension",
            QaError::DegenerateInput(_) => "degenerate_input",
            QaError::Domain(_) => "domain",
            QaError::EmptyInput(_) => "empty_input",
            QaError::UnachievableTarget { .. } => "unachievable_target",
            QaError::UndefinedMetric(_) => "undefined_metric",
            QaError::Config(_) => "config",
            QaError::Checkpoint(_) => "checkpoint",
            QaError::Io(_) => "io",
        }
    }
}
