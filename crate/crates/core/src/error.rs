//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by network evaluation, attacks, bounds, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix/vector dimension did not line up. The message names the
    /// offending layer or operand.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A class index was outside `0..outputs`.
    #[error("class index {index} out of range for {outputs} outputs")]
    ClassIndex { index: usize, outputs: usize },

    /// The intersection of the perturbation ball and the input box is empty.
    #[error("empty feasible set: {0}")]
    EmptyFeasible(String),

    /// Merged bounds crossed (lower > upper), meaning one of the inputs to
    /// the merge was unsound.
    #[error("bounds crossing at layer {layer}, neuron {neuron}: lower {lower} > upper {upper}")]
    CrossingBounds {
        layer: usize,
        neuron: usize,
        lower: f64,
        upper: f64,
    },

    /// A configuration value violated a precondition (step counts, rates,
    /// schedule factors).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A non-finite value turned up where a finite one is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The bisection bracket is invalid: the attack could not succeed even at
    /// the upper end.
    #[error("no adversarial example found at eps_hi={0}: bracket too small")]
    BracketTooSmall(f64),

    /// The attack property is malformed (misclassified input, y == y_tar, ...).
    #[error("not a valid property: {0}")]
    InvalidProperty(String),

    /// The image source ran dry before the requested dataset size was reached.
    #[error("image source exhausted: needed {needed} properties, produced {produced}")]
    SourceExhausted { needed: usize, produced: usize },

    /// An unrecognized attack method name was passed to the benchmark harness.
    #[error("unknown method: {0}")]
    UnknownMethod(String),

    /// A file failed validation after parsing. `location` is a path-qualified
    /// pointer into the document (e.g. `layers[2].weight`).
    #[error("{location}: {message}")]
    FileFormat { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn file(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::FileFormat {
            location: location.into(),
            message: message.into(),
        }
    }
}
