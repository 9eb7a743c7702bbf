use thiserror::Error;

/// Errors raised anywhere in the distillation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error in tensor '{name}': {detail}")]
    Numeric { name: String, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("structural error at block {block}: {detail}")]
    Structural { block: usize, detail: String },

    #[error("data error at row {row}: {detail}")]
    Data { row: usize, detail: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input (config, data, file format)
    /// rather than a failure during execution.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Data { .. }
                | Error::Format { .. }
                | Error::Compatibility(_)
                | Error::Precondition(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
