//! Crate-wide error type with the exit-code mapping used by the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UdiError {
    /// Tensor/shape mismatches (inner dimensions, axis bounds, structure).
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid parameter or configuration value.
    #[error("parameter error: {0}")]
    Param(String),
    /// Mathematical domain violations (log of non-positive, non-stochastic rows).
    #[error("domain error: {0}")]
    Domain(String),
    /// Dataset / file-format problems.
    #[error("data error: {0}")]
    Data(String),
    /// NaN/Inf or a failed numerical check.
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl UdiError {
    /// Process exit code: 2 usage/config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            UdiError::Shape(_) | UdiError::Param(_) | UdiError::Domain(_) => 2,
            UdiError::Data(_) | UdiError::Io(_) => 3,
            UdiError::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, UdiError>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::UdiError::Shape(format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::UdiError::Param(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::UdiError::Data(format!($($arg)*)) };
}

pub(crate) use {data_err, param_err, shape_err};
