use std::io;

use thiserror::Error;

/// Errors produced by model handling, fitting and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("parse error on row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("vertex {vertex} is behind the camera (depth {depth})")]
    BehindCamera { vertex: usize, depth: f64 },

    #[error("under-determined problem: {0}")]
    UnderDetermined(String),

    #[error("numeric failure: {message} (at {iterate:?})")]
    Numeric { message: String, iterate: Vec<f64> },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad user input rather than numerical trouble.
    pub fn is_invalid_input(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Format { .. }
                | Error::Row { .. }
                | Error::UnderDetermined(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Image(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
