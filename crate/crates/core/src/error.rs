use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Format { row: Option<usize>, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate initialization: {0}")]
    DegenerateInit(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("eigengap degeneracy: {0}")]
    Degeneracy(String),

    #[error("delta {delta} too large: the largest admissible value is {max_delta}")]
    DeltaTooLarge { delta: f64, max_delta: f64 },
}

impl Error {
    /// Short machine-readable tag, used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::EmptyInput(_) => "empty_input",
            Error::Validation(_) => "validation",
            Error::Capacity(_) => "capacity",
            Error::Domain(_) => "domain",
            Error::DegenerateInit(_) => "degenerate_init",
            Error::Divergence(_) => "divergence",
            Error::Degeneracy(_) => "degeneracy",
            Error::DeltaTooLarge { .. } => "delta_too_large",
        }
    }

    pub(crate) fn format(row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Format {
            row,
            message: message.into(),
        }
    }
}
