use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("parse error at token {position}: {reason}")]
    Parse { position: usize, reason: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("sample `{key}` too large: {tokens} tokens / {tiles} tiles exceeds budget of {context} tokens / {max_tiles} tiles")]
    SampleTooLarge {
        key: String,
        tokens: usize,
        tiles: u32,
        context: usize,
        max_tiles: u32,
    },
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
