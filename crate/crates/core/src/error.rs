use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite value appeared; `stage` names the block that produced it.
    #[error("numeric fault in {stage}: {detail}")]
    Numeric { stage: String, detail: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) => 1,
            Error::Numeric { .. } => 3,
            Error::Alignment(_)
            | Error::Shape(_)
            | Error::Input(_)
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
        }
    }
}
