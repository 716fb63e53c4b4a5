use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{}map {h}x{w} is too small for dilation {dilation} with a 2x2 window", layer_prefix(*.layer))]
    Geometry {
        layer: Option<u8>,
        dilation: usize,
        h: usize,
        w: usize,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("index {index} out of range 0..{bound} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn layer_prefix(layer: Option<u8>) -> String {
    match layer {
        Some(l) => format!("layer{l}: "),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(offset: usize, detail: impl Into<String>) -> Self {
        Error::Format {
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
