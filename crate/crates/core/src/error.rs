// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A detector or model reached a state where the recursion is undefined.
    #[error("state error: {0}")]
    State(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Monte Carlo estimation could not produce a value.
    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn config_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}
