use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed world file, with the byte offset of the offending token.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Camera rejection sampling exhausted its retry budget, which usually
    /// means the world is degenerate (single class, or no open space).
    #[error("camera sampling failed after {0} attempts")]
    CameraSampling(usize),

    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
