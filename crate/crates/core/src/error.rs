use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("resolution ratio {target}/{source_res} is not an integer or its reciprocal")]
    Ratio { source_res: f64, target: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("channel {channel}: {reason}")]
    Channel { channel: usize, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("missing entry: {0}")]
    Missing(String),

    #[error("malformed grid file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
