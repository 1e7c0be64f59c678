use thiserror::Error;

/// Errors produced anywhere in the correspondence pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("degenerate affinity row {row}: positive block sums to zero")]
    DegenerateRow { row: usize },

    #[error("patch tracking failed: {0}")]
    TrackingFailure(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    Aborted(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code used by the command-line front end.
    ///
    /// Validation and configuration problems map to 1, runtime aborts to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Validation(_)
            | Error::Config(_)
            | Error::Format(_)
            | Error::DegenerateRow { .. } => 1,
            Error::TrackingFailure(_) | Error::Aborted(_) | Error::Io(_) | Error::Image(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
