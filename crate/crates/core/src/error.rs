use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cluster initialization failed: class {class} has no samples")]
    Init { class: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("format error at line {line}: {message}")]
    Format { line: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI's stderr error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Empty(_) => "empty",
            Error::NonFinite(_) => "non_finite",
            Error::Label { .. } => "label",
            Error::Argument(_) => "argument",
            Error::Config(_) => "config",
            Error::Init { .. } => "init",
            Error::Training(_) => "training",
            Error::Spec(_) => "spec",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
