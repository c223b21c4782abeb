use thiserror::Error;

use crate::env::EnvError;
use crate::geometry::GeometryError;
use crate::ot::OtError;
use crate::primitives::PrimitiveError;
use crate::rl::RlError;
use crate::supervisor::ProtocolError;

/// Crate-wide error. Each module has its own error enum; this wraps them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Ot(#[from] OtError),

    #[error(transparent)]
    Geometry(#[from] GeometryError),

    #[error(transparent)]
    Primitive(#[from] PrimitiveError),

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error(transparent)]
    Env(#[from] EnvError),

    #[error(transparent)]
    Rl(#[from] RlError),

    #[error("perception returned no keypoints")]
    PerceptionEmpty,

    #[error("run aborted: {0}")]
    Aborted(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
