use thiserror::Error;

#[derive(Debug, Error)]
pub enum DropError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("non-finite activations in backbone stage {stage}")]
    NonFiniteStage { stage: usize },

    #[error("non-finite value in loss term `{term}`{}", batch.map(|b| format!(" at batch {b}")).unwrap_or_default())]
    NonFiniteLoss { term: String, batch: Option<usize> },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("no queries")]
    NoQueries,

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl DropError {
    /// Process exit code: 1 for configuration problems, 2 for everything that
    /// fails at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            DropError::Config(_)
            | DropError::UnknownStrategy { .. }
            | DropError::TomlDe(_)
            | DropError::TomlSer(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, DropError>;
