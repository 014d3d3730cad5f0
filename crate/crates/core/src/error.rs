use thiserror::Error;

use crate::net_model::{FlowId, LinkId, NodeId, ValidationError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Validation(#[from] ValidationError),

    #[error("unknown link {0}")]
    UnknownLink(LinkId),

    #[error("unknown flow {0}")]
    UnknownFlow(FlowId),

    #[error("unknown node {0}")]
    UnknownNode(NodeId),

    #[error("state (hop {hop}, time-to-go {time_to_go}) outside policy table")]
    StateOutOfRange { hop: usize, time_to_go: usize },

    #[error("enumeration needs {states} feasible states, cap is {cap}")]
    EnumerationCap { states: usize, cap: usize },

    #[error("no policy table for flow {0}")]
    MissingTable(FlowId),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("sweep point {value} (policy {policy}, seed {seed}): {source}")]
    SweepPoint {
        value: f64,
        policy: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
