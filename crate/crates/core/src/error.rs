use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{width}x{height} frame cannot be split into a {rows}x{cols} grid")]
    NonDivisibleGrid {
        width: usize,
        height: usize,
        rows: usize,
        cols: usize,
    },

    #[error("token {token} out of range for a grid of {num_tokens} tokens")]
    TokenOutOfRange { token: usize, num_tokens: usize },

    #[error("histogram has no pixels")]
    EmptyHistogram,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("not a probability distribution (sum = {sum})")]
    NotADistribution { sum: f64 },

    #[error("cannot reuse {count} tokens from an empty cache")]
    ColdCacheReuse { count: usize },

    #[error("report needs at least one step")]
    EmptyTrace,

    #[error("invalid scene: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(step: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::AtStep {
            step,
            source: Box::new(source),
        }
    }

    /// Process exit code: 2 for internal invariant violations, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant(_) => 2,
            Error::AtStep { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
