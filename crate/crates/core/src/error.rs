use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("in layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from every tracked tensor")]
    DetachedLoss,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("checkpoint version mismatch: expected magic {expected:?}, found {found:?}")]
    VersionMismatch { expected: Vec<u8>, found: Vec<u8> },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("unknown architecture tag `{0}`")]
    UnknownArch(String),

    #[error("checkpoint does not match architecture: {0}")]
    Checkpoint(String),

    #[error("average surface distance is undefined: {0} surface is empty")]
    UndefinedAsd(&'static str),

    #[error("volume format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }
}
