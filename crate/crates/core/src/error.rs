use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("element {index} is {value}, expected exactly +1 or -1")]
    NotSign { index: usize, value: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention row sums to {0}, expected 1")]
    RowSum(f64),

    #[error("index {0} is not in the selected index set")]
    MissingDiagonal(usize),

    #[error("calibration batch is empty")]
    EmptyBatch,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("distillation weight must lie in [0, 1], got {0}")]
    Lambda(f64),

    #[error("tape is sealed: backward has already run")]
    TapeSealed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
