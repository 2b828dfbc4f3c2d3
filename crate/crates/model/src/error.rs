use thiserror::Error;

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch at {layer}: {detail}")]
    Shape { layer: String, detail: String },

    #[error("lead time {0} min outside [0, 720]")]
    Lead(u32),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Core(#[from] nowcast_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ModelError {
    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        ModelError::Shape { layer: layer.into(), detail: detail.into() }
    }
}
