use thiserror::Error;

/// Errors raised by network construction, dynamics, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("sublayer dimension mismatch at gap {gap}: {detail}")]
    SublayerMismatch { gap: usize, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer index {index} out of range for a network with {count} layers")]
    LayerOutOfRange { index: usize, count: usize },

    #[error("precision matrix is not positive definite{0}")]
    NotSpd(String),

    #[error("prediction errors are stale; call refresh_errors first")]
    StaleErrors,

    #[error("non-finite value in {variable} of layer {layer}")]
    NonFinite { layer: usize, variable: String },

    #[error("checkpoint parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unsupported diagnostic: {0}")]
    Unsupported(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
