use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite state at integration step {step}")]
    Blowup { step: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("missing channel: {0}")]
    Contract(String),
    #[error("training diverged at step {step} (seed {seed}): {what}")]
    Diverged { step: usize, seed: u64, what: String },
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
