use thiserror::Error;

/// Errors raised by the filters, simulators and experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numerical {
        step: Option<usize>,
        message: String,
    },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            step: None,
            message: message.into(),
        }
    }

    /// Attach a time-step index to a numerical error; other variants pass through.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numerical { step: None, message } => Error::Numerical {
                step: Some(step),
                message,
            },
            other => other,
        }
    }

    /// Process exit status for the command-line runner.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => 2,
            Error::Numerical { .. } | Error::DegenerateData(_) | Error::Precondition(_) => 3,
            Error::Io(_) | Error::Csv(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
