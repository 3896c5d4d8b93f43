//! Error type shared by every module in the crate.
//!
//! The convention throughout is that *contract violations* (bad shapes, bad
//! arguments, malformed files) are reported as typed errors rather than
//! panics, so callers — in particular the CLI — can surface them with a
//! proper exit status. Panics are reserved for internal logic bugs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that violate its contract.
    /// `op` names the operation, `msg` names the offending axis or value.
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// Cross-attention (and anything else keyed to the trained band count)
    /// was asked to run on an input with the wrong number of bands.
    #[error("band count mismatch: expected {expected} bands, got {got}")]
    BandCount { expected: usize, got: usize },

    /// Spatial extents must be divisible by the downsampling factor; the
    /// library never pads silently.
    #[error("{axis} extent {extent} is not divisible by {multiple}; pad and crop at the call site")]
    PaddingRequired {
        axis: &'static str,
        extent: usize,
        multiple: usize,
    },

    /// A non-finite value appeared where the contract requires finite data
    /// (gradients during training, payloads in containers, ...).
    #[error("non-finite {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    /// A binary stream did not start with the expected magic bytes.
    #[error("bad magic for {format}: expected {expected:?}, got {got:?}")]
    BadMagic {
        format: &'static str,
        expected: &'static str,
        got: Vec<u8>,
    },

    /// A binary stream ended before its declared payload.
    #[error("truncated {format}: {detail}")]
    Truncated {
        format: &'static str,
        detail: String,
    },

    /// A serialized tensor name that the target model does not declare.
    #[error("unknown tensor name {0:?}")]
    UnknownTensor(String),

    /// The model declares a tensor that the stream did not provide.
    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    /// A serialized tensor exists but its extents disagree with the model.
    #[error("tensor {name:?}: stored shape {stored:?} does not match model shape {expected:?}")]
    TensorShape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },

    /// The inner conjugate-gradient solver saw its residual grow over three
    /// consecutive steps.
    #[error("conjugate gradient diverged: {0}")]
    CgDiverged(String),

    /// Malformed run configuration (CLI config files, option structs).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training was asked to run over zero images.
    #[error("empty dataset")]
    EmptyDataset,

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<V> = std::result::Result<V, Error>;

impl Error {
    /// Shorthand used by kernels for shape-contract violations.
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }
}
