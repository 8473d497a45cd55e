//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad dimensions, unknown keys, bad presets).
    #[error("config error: {0}")]
    Config(String),

    /// A parameter name was registered twice in the same store.
    #[error("duplicate parameter name: {0}")]
    DuplicateParam(String),

    /// A gradient or loss stopped being finite; the run must abort.
    #[error("non-finite {what} in `{param}` at optimizer step {step}")]
    NonFinite {
        what: &'static str,
        param: String,
        step: u64,
    },

    /// Training loss diverged to NaN/inf.
    #[error("non-finite loss at train step {step} (env step {env_step}): {detail}")]
    DivergedLoss {
        step: u64,
        env_step: u64,
        detail: String,
    },

    /// Checkpoint file is malformed, truncated, or from an unknown version.
    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    /// Loaded checkpoint cannot run on the requested scenario or model.
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// An operation was called in a state it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
