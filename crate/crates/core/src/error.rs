use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error in {block}: expected {expected}, got {actual}")]
    Shape {
        block: String,
        expected: String,
        actual: String,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("dataset not found: {0}")]
    MissingDataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        block: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            block: block.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Stable machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Input(_) => "input",
            Error::Template(_) => "template",
            Error::Contract(_) => "contract",
            Error::UnknownKey(_) => "unknown_key",
            Error::MissingDataset(_) => "missing_dataset",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
