use thiserror::Error;

#[derive(Debug, Error)]
pub enum StenosisError {
    #[error(transparent)]
    Grad(#[from] gradcore::GradError),

    #[error("{0}")]
    Invalid(String),

    #[error("point ({row}, {col}) outside {size}x{size} image")]
    OutOfBounds { row: i64, col: i64, size: usize },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<StenosisError>,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("{0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl StenosisError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        StenosisError::Invalid(msg.into())
    }

    pub fn in_stage(stage: &'static str) -> impl FnOnce(StenosisError) -> StenosisError {
        move |e| StenosisError::Stage { stage, source: Box::new(e) }
    }
}

pub type Result<T> = std::result::Result<T, StenosisError>;

/// Lets loss closures run inside the engine's gradient checker.
impl From<StenosisError> for gradcore::GradError {
    fn from(e: StenosisError) -> Self {
        match e {
            StenosisError::Grad(g) => g,
            other => gradcore::GradError::InvalidOp(other.to_string()),
        }
    }
}
