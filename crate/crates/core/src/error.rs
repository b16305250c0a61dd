//! Error kinds shared by every module in this crate.

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Incompatible or invalid tensor/record shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value violates a domain precondition (non-finite input,
    /// empty batch, not a probability distribution, ...).
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// Invalid configuration (bad axis choice is a shape error; a bad
    /// temperature, layer index, or k is a config error).
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced a non-finite value. `site` names where
    /// (layer index, training step) so failures are attributable.
    #[error("numerical error at {site}: {detail}")]
    Numerical { site: String, detail: String },

    /// Least-squares fit is undefined (zero variance in the model values).
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidValue(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(site: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            site: site.into(),
            detail: detail.into(),
        }
    }
}
