use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("softmax row {row} has no unmasked entry")]
    DegenerateRow { row: usize },

    #[error("cross entropy over zero non-ignored positions")]
    EmptyLoss,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("input: {0}")]
    Input(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("data: {0}")]
    Data(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("gradient check failed for {param}: relative error {rel_err:e} >= {tolerance:e}")]
    GradCheck {
        param: String,
        rel_err: f64,
        tolerance: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
