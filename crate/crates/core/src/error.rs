use thiserror::Error;

pub type Result<T> = std::result::Result<T, PsdError>;

#[derive(Debug, Error)]
pub enum PsdError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error on `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {message}")]
    Numeric {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PsdError {
    pub fn shape(msg: impl Into<String>) -> Self {
        PsdError::Shape(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        PsdError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        PsdError::Format {
            offset,
            message: message.into(),
        }
    }

    /// Name of the module family the error originates from, used by the CLI
    /// when printing diagnostics.
    pub fn origin(&self) -> &'static str {
        match self {
            PsdError::Shape(_) | PsdError::Domain(_) | PsdError::Contract(_) => "tensor/model",
            PsdError::Config { .. } => "config",
            PsdError::Format { .. } | PsdError::Generation(_) => "data",
            PsdError::Numeric { .. } => "trainer",
            PsdError::Io(_) | PsdError::Json(_) => "io",
        }
    }
}
