use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape spec `{spec}`: {reason}")]
    ShapeParse { spec: String, reason: String },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("surface sampling exhausted after {attempts} candidate draws ({accepted} of {wanted} accepted)")]
    SamplingExhausted {
        attempts: usize,
        accepted: usize,
        wanted: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid resolution pair: {from} -> {to}")]
    ResolutionPair { from: usize, to: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("hierarchy has no base level")]
    MissingBaseLevel,

    #[error("subvolume {0} has queries but no token selection")]
    MissingSelection(u32),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("bad volume file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
