use thiserror::Error;

/// Errors produced while loading data or running a conformal pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A file does not follow its declared layout.
    #[error("format error: {0}")]
    Format(String),
    /// Values parse but violate a domain invariant.
    #[error("data error: {0}")]
    Data(String),
    /// Invalid argument to an operation (empty input, out-of-range index).
    #[error("input error: {0}")]
    Input(String),
    /// Inconsistent or unsupported configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
