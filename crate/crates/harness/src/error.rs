use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(std::path::PathBuf),
    #[error("unsupported {what} format version {found}")]
    FormatVersion { what: &'static str, found: u32 },
    #[error(transparent)]
    Core(#[from] hybridsd::Error),
    #[error(transparent)]
    EdgeCloud(#[from] hybridsd_edgecloud::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
