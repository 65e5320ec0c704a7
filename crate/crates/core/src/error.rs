use thiserror::Error;

use crate::actv::{HeadId, Stream};

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite input in {0}")]
    NonFiniteInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("stream {0} not present in activation set")]
    MissingStream(Stream),

    #[error("insufficient samples: need at least {needed} tokens, have {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("graph has no edges")]
    EmptyGraph,

    #[error("head {0} is not part of the graph")]
    UnknownHead(HeadId),

    #[error("selection infeasible for stream {stream}: achieved fraction {achieved_fraction:.4}")]
    SelectionInfeasible {
        stream: Stream,
        achieved_fraction: f64,
    },

    #[error("plan does not match source: {0}")]
    PlanMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
