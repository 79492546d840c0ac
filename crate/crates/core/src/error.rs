use thiserror::Error;

/// Every failure the library reports. The CLI maps the variants onto its
/// exit codes, so new variants need a slot there too.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Hyperparameters or run settings that violate a documented range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// API misuse, e.g. a second backward pass on one tape.
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN/Inf where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}

pub(crate) use {config_err, contract_err, data_err, dim_err};
