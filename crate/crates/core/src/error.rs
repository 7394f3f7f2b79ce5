use thiserror::Error;

/// Errors produced anywhere in the codec, allocator or harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("optimizer refused step: non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("malformed image: {0}")]
    Image(String),
    #[error("symbol {symbol} outside alphabet [{min}, {max}]")]
    SymbolOutOfRange { symbol: i32, min: i32, max: i32 },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("bitstream: {0}")]
    Bitstream(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("infeasible budget: R_max = {budget} bits, the coarsest allocation needs {minimum} bits")]
    InfeasibleBudget { budget: f64, minimum: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
