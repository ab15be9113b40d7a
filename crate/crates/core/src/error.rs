use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("no boundary: {0}")]
    NoBoundary(String),

    #[error("empty point set: {0}")]
    EmptySet(String),

    #[error("class {0} is absent")]
    ClassAbsent(u16),

    #[error("coverage: {0}")]
    Coverage(String),

    #[error("volume of {voxels} voxels exceeds the oracle limit of {limit}")]
    TooLarge { voxels: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
