use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty rollout group")]
    EmptyGroup,

    #[error("answer not in distribution: {0:?}")]
    AnswerNotInDistribution(String),

    #[error("unseen prompt: {0:?}")]
    UnseenPrompt(String),

    #[error("prompt kind does not match policy kind: {0}")]
    KindMismatch(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
