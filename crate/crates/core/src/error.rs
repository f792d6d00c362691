use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("item id {id} out of range for vocabulary of {num_items}")]
    IndexOutOfRange { id: u32, num_items: usize },

    #[error("empty context (valid_len = 0)")]
    EmptyContext,

    #[error("invalid item statistics: {0}")]
    InvalidStats(String),

    #[error("batch of {0} examples has no in-batch negatives")]
    DegenerateBatch(usize),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("IDW wake phase diverged at iteration {iteration}: {source}")]
    WakeDivergence {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("evaluation protocol: {0}")]
    Protocol(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
