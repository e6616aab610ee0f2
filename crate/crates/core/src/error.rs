use std::path::PathBuf;

use thiserror::Error;

/// Every failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid conformation: {0}")]
    InvalidConformation(String),
    #[error("invalid molecular graph: {0}")]
    InvalidGraph(String),
    #[error("molecular graph is disconnected")]
    DisconnectedGraph,
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("ensemble carries neither weights nor energies")]
    MissingLabels,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("model error: {0}")]
    Model(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("molecule {mol_id}: need at least {needed} generated conformers, got {got}")]
    InsufficientSamples {
        mol_id: String,
        needed: usize,
        got: usize,
    },
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
