use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rollout data: {0}")]
    Rollout(String),
    #[error("invalid reward {0}: raw rewards must be 0 or 1")]
    NonBinaryReward(f64),
    #[error("kl undefined: reference probability is zero at index {0} where the policy is positive")]
    KlSupport(usize),
    #[error("distribution not normalized (sum = {0})")]
    Unnormalized(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite gradient norm ({0})")]
    NonFiniteGradient(f64),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
