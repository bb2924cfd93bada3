use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} (size {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("merge refused for MoLoRA slots: {}", slots.join(", "))]
    MergeRefused { slots: Vec<String> },

    #[error("bad checkpoint magic {found:?}, expected \"MLRA\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint does not match base model: {0}")]
    ConfigMismatch(String),

    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
