use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no gradient recorded for node {0}: tensor is detached from the graph")]
    AbsentGradient(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown bottleneck `{0}`")]
    UnknownBottleneck(String),

    #[error("training diverged in branch `{branch}` at epoch {epoch}: loss is not finite")]
    Divergence { branch: String, epoch: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("no pitch detected: {0}")]
    NoPitch(String),

    #[error("degenerate probe input: {0}")]
    Degenerate(String),

    #[error("TCAV score undefined: {0}")]
    UndefinedScore(String),

    #[error("report incomplete: {0}")]
    Completeness(String),

    #[error("refusing to overwrite {} (pass --force)", .0.display())]
    Overwrite(PathBuf),

    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
