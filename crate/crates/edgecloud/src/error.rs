use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame of {len} bytes exceeds limit {max}")]
    FrameTooLarge { len: usize, max: usize },
    #[error("frame length field says {declared} bytes, got {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("server replied with error: {0}")]
    Remote(String),
    #[error("invalid channel: {0}")]
    InvalidChannel(String),
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
    #[error(transparent)]
    Core(#[from] hybridsd::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
