use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("map generation failed for seed {seed}: no connected map after {attempts} attempts")]
    MapGen { seed: u64, attempts: u32 },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("goal unreachable from start")]
    Unreachable,

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("model capability: {0}")]
    Capability(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (diffusion {diffusion}, distance {distance})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        diffusion: f64,
        distance: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
