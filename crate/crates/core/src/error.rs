use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error("invalid task definition: {0}")]
    TaskDefinition(String),

    #[error("label {label} is not a class of task {task}")]
    LabelOutsideTask { label: u32, task: u32 },

    #[error("non-finite loss at task {task}, epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        task: u32,
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("metric matrix incomplete: {0}")]
    MissingEntries(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "degenerate_input",
            Error::Parameter(_) => "parameter",
            Error::Calibration(_) => "calibration",
            Error::Shape { .. } => "shape",
            Error::Empty(_) => "empty",
            Error::UnknownTask(_) => "unknown_task",
            Error::TaskDefinition(_) => "task_definition",
            Error::LabelOutsideTask { .. } => "label_outside_task",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::MissingEntries(_) => "missing_entries",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
