use std::path::PathBuf;

use crate::tensor::Shape;
use crate::weights::ContainerError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("node `{id}`: {source}")]
    Node {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("missing weight `{0}`")]
    MissingWeight(String),

    #[error("weight `{name}` has dims {found:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("unsupported image format (magic {magic:?})")]
    UnsupportedImage { magic: String },

    #[error("malformed image: {0}")]
    MalformedImage(String),

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn at_node(id: &str, source: Error) -> Self {
        Error::Node {
            id: id.to_string(),
            source: Box::new(source),
        }
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
