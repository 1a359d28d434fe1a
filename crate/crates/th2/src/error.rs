use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] th2_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("chunk {chunk}, member {member}: {reason}")]
    Stream {
        chunk: String,
        member: String,
        reason: String,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
