use std::path::PathBuf;

/// Errors produced across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an API precondition (shape mismatch, out-of-range config value).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An environment produced a non-finite observation or reward.
    #[error("non-finite {what} from environment at step {step}")]
    NonFiniteEnv { what: &'static str, step: usize },

    /// A candidate rollout during ES returned a non-finite value.
    #[error("non-finite return at generation {generation}, candidate {candidate}")]
    NonFiniteReturn { generation: usize, candidate: usize },

    /// PPO loss or gradient blew up.
    #[error("non-finite PPO loss at update {update}: {detail}")]
    NonFiniteLoss { update: usize, detail: String },

    #[error("unknown environment id `{0}`")]
    UnknownEnv(String),

    #[error("invalid checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("invalid run log: {0}")]
    Log(String),

    #[error("invalid plan: {0}")]
    Plan(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
