use qface_numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("pgm: {0}")]
    Pgm(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable category used in command-line error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Numerics(_) => "numerics",
            Error::DegenerateRotation(_) => "rotation",
            Error::Metric(_) => "metric",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Pgm(_) => "pgm",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
