use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("degenerate activation: {0}")]
    DegenerateActivation(String),
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DegenerateGeometry(_) => "degenerate-geometry",
            Error::InvalidDataset(_) => "invalid-dataset",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::DegenerateVariance(_) => "degenerate-variance",
            Error::DegenerateActivation(_) => "degenerate-activation",
            Error::UnsupportedVersion { .. } => "unsupported-version",
            Error::Format(_) => "format",
            Error::ConfigMismatch(_) => "config-mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
