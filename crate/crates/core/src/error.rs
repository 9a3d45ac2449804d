use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: input out of domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value at element {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("invalid axis {axis} for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("data out of support for {model} at element {index}: {value}")]
    Support {
        model: &'static str,
        index: usize,
        value: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    ConfigNode { path: String, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("missing array `{0}`")]
    MissingArray(String),

    #[error("file format: {0}")]
    Format(String),

    #[error("checkpoint config hash mismatch (file {found}, expected {expected})")]
    HashMismatch { found: String, expected: String },

    #[error("non-finite loss at step {step}: {components}")]
    NonFiniteLoss { step: u64, components: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::NonFinite { .. } => "non_finite",
            Error::Axis { .. } => "axis",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::Support { .. } => "support",
            Error::Config(_) | Error::ConfigNode { .. } => "config",
            Error::Parse { .. } => "parse",
            Error::Dataset(_) | Error::MissingArray(_) => "dataset",
            Error::Format(_) => "format",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn node(path: &str, msg: impl Into<String>) -> Self {
        Error::ConfigNode {
            path: if path.is_empty() {
                "<root>".into()
            } else {
                path.to_string()
            },
            msg: msg.into(),
        }
    }
}
