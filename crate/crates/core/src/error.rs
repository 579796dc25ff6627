use std::fmt;
use std::io;

use crate::tensor::Shape;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Two shapes that had to agree did not.
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    /// A shape violated a structural requirement (rank, extent, channel count).
    Shape(String),
    /// Arithmetic outside the domain the engine accepts (division by zero, rsqrt of x <= 0).
    Domain(String),
    /// Malformed CBNT container; `offset` is the byte position where decoding stopped.
    Format { offset: usize, message: String },
    /// An operation was asked of a block or graph in a mode that does not support it.
    Mode(String),
    /// Graph JSON violated the schema. `node` names the offending node id.
    Schema { node: String, message: String },
    /// Batch statistics need more elements per channel than were provided.
    DegenerateBatch { elements: usize, required: usize },
    /// Invalid user input (label range, empty dataset, bad flag value).
    Input(String),
    /// turn_on was asked for a mode it cannot produce.
    UnsupportedRewrite(String),
    /// A tensor file lacked the entries a command needs.
    Ingestion { missing: Vec<String> },
    /// Instrumented and analytic saved-tensor sets disagree.
    FootprintMismatch(String),
    /// A loss or value became NaN/inf.
    NonFinite(String),
    /// Error raised while evaluating a specific graph node.
    AtNode { node: String, source: Box<Error> },
    Io(io::Error),
    Json(serde_json::Error),
}

impl Error {
    pub fn at_node(node: &str, source: Error) -> Error {
        Error::AtNode {
            node: node.to_string(),
            source: Box::new(source),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Error {
        Error::Shape(msg.into())
    }

    pub(crate) fn schema(node: &str, msg: impl Into<String>) -> Error {
        Error::Schema {
            node: node.to_string(),
            message: msg.into(),
        }
    }

    /// Strips any number of `AtNode` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtNode { source, .. } => source.root(),
            other => other,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left} and {right}")
            }
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Mode(msg) => write!(f, "mode error: {msg}"),
            Error::Schema { node, message } => write!(f, "schema error at node {node}: {message}"),
            Error::DegenerateBatch { elements, required } => write!(
                f,
                "degenerate batch: {elements} elements per channel, need at least {required}"
            ),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::UnsupportedRewrite(msg) => write!(f, "unsupported rewrite: {msg}"),
            Error::Ingestion { missing } => {
                write!(f, "missing tensors: {}", missing.join(", "))
            }
            Error::FootprintMismatch(msg) => write!(f, "saved-tensor mismatch: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::AtNode { node, source } => write!(f, "node {node}: {source}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::AtNode { source, .. } => Some(source.as_ref()),
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
