use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: row {row}: {msg}")]
    Parse {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("singular KKT system (condition estimate {cond:.3e})")]
    Singular { cond: f64 },

    #[error("infeasible QP: {0}")]
    Infeasible(String),

    #[error("solver failed at step {step}: {msg}")]
    Solver { step: usize, msg: String },

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    InsufficientBuffer { have: usize, need: usize },

    #[error("episode already finished at step {0}")]
    EpisodeDone(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
