use std::path::PathBuf;

/// Every failure the toolkit reports.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("unresolved tensor names: {}", .0.join(", "))]
    Resolution(Vec<String>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range (len {len})")]
    Range { index: usize, len: usize },

    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        /// Best eigen-iterate seen, when the failing routine tracks one.
        best: Option<Box<crate::linalg::EigenPair>>,
    },

    #[error("ill-conditioned system (condition estimate {condition:.3e}); increase the ridge")]
    IllConditioned { condition: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite value at {location}")]
    Numeric { location: String },

    #[error("no hidden states exceeded the norm threshold {threshold}; try a lower threshold")]
    EmptyCollection { threshold: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("signatures are not comparable: {0}")]
    Incomparable(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Convergence { .. } => 3,
            _ => 2,
        }
    }
}
