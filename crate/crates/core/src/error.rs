use std::path::PathBuf;

use featlens_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{}: bad magic {found:#010x}, expected {expected:#010x}", path.display())]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{}: truncated ({what})", path.display())]
    Truncated { path: PathBuf, what: String },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint is not in FLNS format")]
    NotCheckpoint,

    #[error("checkpoint version {0} is not supported")]
    UnsupportedVersion(u32),

    #[error("checkpoint entry `{0}` is truncated")]
    TruncatedEntry(String),

    #[error("checkpoint entry `{0}` appears twice")]
    DuplicateEntry(String),

    #[error("checkpoint has no entry `{0}`")]
    MissingEntry(String),

    #[error("config line {line}: {msg}")]
    ConfigSyntax { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("host parameters changed during training")]
    HostDrift,

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("no lens registered for bin `{0}`")]
    UnresolvedBin(String),

    #[error("angle {0} does not fall on a lens bin")]
    UnbinnedAngle(f64),

    #[error("{0}: input has zero variance")]
    Degenerate(&'static str),

    #[error("nothing to evaluate: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
