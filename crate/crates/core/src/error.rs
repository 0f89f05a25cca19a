use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid range: min {min} > max {max}")]
    InvalidRange { min: f64, max: f64 },

    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: i64, lo: i64, hi: i64 },

    #[error("unsupported bit width {0} (expected 4, 8 or 16)")]
    Bits(u32),

    #[error("invalid quantization parameters: {0}")]
    Params(String),

    #[error("undefined signal: {0}")]
    UndefinedSignal(&'static str),

    #[error("32-bit accumulator overflow at row {row}, col {col}")]
    AccumulatorOverflow { row: usize, col: usize },

    #[error("context overflow at step {step}: max_context is {max_context}")]
    ContextOverflow { step: usize, max_context: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("no calibrated range for site `{0}`")]
    MissingRange(String),

    #[error("precision plan does not cover `{0}`")]
    Uncovered(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
