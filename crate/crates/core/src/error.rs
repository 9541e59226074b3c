use thiserror::Error;

use crate::gateway::GatewayError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("duplicate evidence id `{0}`")]
    DuplicateEvidence(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("index file: {0}")]
    IndexFormat(String),

    #[error("turn {turn} out of range for conversation with {len} turns")]
    TurnOutOfRange { turn: usize, len: usize },

    #[error("model produced no usable samples")]
    EmptySample,

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: GatewayError,
    },

    #[error(transparent)]
    Gateway(#[from] GatewayError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

/// Pipeline stage, used to attribute failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Qu,
    Erf,
    Ag,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Qu => "qu",
            Stage::Erf => "erf",
            Stage::Ag => "ag",
        })
    }
}
