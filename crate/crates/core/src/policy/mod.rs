//! Policy contract and its implementations.

pub mod features;
pub mod remote;
pub mod scripted;
pub mod toy;
pub mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionSpace, AgentTurn, Observation};

pub use vocab::{Vocab, VocabError};

/// Everything a policy may look at for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyContext {
    pub instruction: String,
    pub observation: Observation,
    pub history: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Stochastic,
}

/// One sampled output. Token ids are absent for remote policies; log
/// probabilities are absent when the backend does not expose them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTurn {
    pub turn: AgentTurn,
    pub token_ids: Option<Vec<u32>>,
    pub token_logprobs: Option<Vec<f64>>,
}

impl SampledTurn {
    /// Usable for ratio computations only with both ids and log-probabilities.
    pub fn trainable(&self) -> bool {
        matches!((&self.token_ids, &self.token_logprobs), (Some(a), Some(b)) if a.len() == b.len())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("remote policy unreachable: {0}")]
    RemoteUnreachable(String),
    #[error("malformed policy response: {0}")]
    MalformedResponse(String),
    #[error("policy cannot sample: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub trait Policy: Send + Sync {
    /// Draws `n` turns. Greedy mode returns `n` identical decodes; stochastic
    /// mode is reproducible for a fixed `seed`.
    fn sample(&self, ctx: &PolicyContext, n: usize, mode: DecodeMode, seed: u64) -> Result<Vec<SampledTurn>, PolicyError>;

    fn action_space(&self) -> &ActionSpace;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn sample(&self, ctx: &PolicyContext, n: usize, mode: DecodeMode, seed: u64) -> Result<Vec<SampledTurn>, PolicyError> {
        (**self).sample(ctx, n, mode, seed)
    }

    fn action_space(&self) -> &ActionSpace {
        (**self).action_space()
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn sample(&self, ctx: &PolicyContext, n: usize, mode: DecodeMode, seed: u64) -> Result<Vec<SampledTurn>, PolicyError> {
        (**self).sample(ctx, n, mode, seed)
    }

    fn action_space(&self) -> &ActionSpace {
        (**self).action_space()
    }
}
