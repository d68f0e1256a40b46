use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("node `{node}`: {detail}")]
    Node { node: String, detail: String },

    #[error("invalid op parameters: {0}")]
    InvalidOp(String),

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape was recorded for a different graph or input")]
    StaleTape,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GradError {
    pub(crate) fn at_node(node: &str, err: GradError) -> GradError {
        match err {
            GradError::Node { .. } => err,
            other => GradError::Node {
                node: node.to_string(),
                detail: other.to_string(),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, GradError>;
