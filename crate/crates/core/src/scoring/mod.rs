//! Sequence perplexity and the backends that produce it.
//!
//! Perplexity is `exp(-(1/|z|) * sum_i log p(z_i | z_<i))` over the token
//! sequence `z` of an input/output pair. Within a cluster of semantically
//! close examples the task-difficulty part of that number is roughly shared,
//! so what separates a mislabeled pair from its neighbours is the extra
//! perplexity its wrong output adds. [`SyntheticScorer`] makes that split
//! explicit for model-free tests.

mod backends;
mod batch;
mod cache;
mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backends::{FileScorer, SyntheticScorer, SyntheticScorerModel};
pub use batch::{batch_score, CountingScorer, RetryPolicy};
pub use cache::{content_hash, ScoreCache};
pub use remote::HttpScorer;

use crate::corpus::Example;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("no log-probabilities to average")]
    EmptyLogProbs,
    #[error("log-probability #{index} is {value}; expected a finite value <= 0")]
    InvalidLogProb { index: usize, value: f64 },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("context overflow: {0}")]
    ContextOverflow(String),
    #[error("backend has no score for {0:?}")]
    NoScore(String),
    #[error("id {0:?} is not in the pool")]
    UnknownId(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("score cache {path}: {message}")]
    Cache { path: String, message: String },
    #[error("{} of {total} ids failed to score: {}", failed.len(), failed.join(", "))]
    PartialFailure { failed: Vec<String>, total: usize },
}

impl ScoreError {
    /// Transport-level failures are retried; everything else is final.
    pub fn is_retriable(&self) -> bool {
        matches!(self, ScoreError::BackendUnavailable(_))
    }
}

pub type Result<T, E = ScoreError> = std::result::Result<T, E>;

/// Logarithm base a backend reports log-probabilities in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
    Ten,
}

impl LogBase {
    fn to_natural(self, v: f64) -> f64 {
        match self {
            LogBase::Natural => v,
            LogBase::Two => v * std::f64::consts::LN_2,
            LogBase::Ten => v * std::f64::consts::LN_10,
        }
    }
}

/// Which tokens enter the perplexity average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplOn {
    /// Every token of the rendered input/output pair.
    #[default]
    Sequence,
    /// Only the output tokens, conditioned on the input.
    Output,
}

impl std::str::FromStr for PplOn {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sequence" => Ok(PplOn::Sequence),
            "output" => Ok(PplOn::Output),
            _ => Err(format!("unknown perplexity span {s:?} (expected sequence or output)")),
        }
    }
}

/// Per-token natural-log probabilities for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogProbs {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub source_id: String,
}

impl TokenLogProbs {
    pub fn new(source_id: impl Into<String>, tokens: Vec<String>, logprobs: Vec<f64>) -> Result<Self> {
        if logprobs.is_empty() {
            return Err(ScoreError::EmptyLogProbs);
        }
        if tokens.len() != logprobs.len() {
            return Err(ScoreError::Protocol(format!(
                "{} tokens but {} log-probabilities",
                tokens.len(),
                logprobs.len()
            )));
        }
        if let Some((index, &value)) = logprobs.iter().enumerate().find(|(_, v)| !v.is_finite() || **v > 0.0) {
            return Err(ScoreError::InvalidLogProb { index, value });
        }
        Ok(Self { tokens, logprobs, source_id: source_id.into() })
    }

    /// Converts from another log base at the boundary.
    pub fn from_base(source_id: impl Into<String>, tokens: Vec<String>, logprobs: Vec<f64>, base: LogBase) -> Result<Self> {
        Self::new(source_id, tokens, logprobs.into_iter().map(|v| base.to_natural(v)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityScore {
    #[serde(rename = "id")]
    pub example_id: String,
    pub perplexity: f64,
    pub backend_tag: String,
}

/// `exp` of the mean negative log-probability, with a compensated sum.
pub fn perplexity(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(ScoreError::EmptyLogProbs);
    }
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for &v in logprobs {
        if !v.is_finite() {
            return Err(ScoreError::InvalidLogProb { index: 0, value: v });
        }
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    Ok((-(sum + carry) / logprobs.len() as f64).exp())
}

pub fn perplexity_from_logprobs(lp: &TokenLogProbs, backend_tag: &str) -> Result<PerplexityScore> {
    Ok(PerplexityScore {
        example_id: lp.source_id.clone(),
        perplexity: perplexity(&lp.logprobs)?,
        backend_tag: backend_tag.to_string(),
    })
}

/// Anything that can put a perplexity on an example.
pub trait ScorerBackend: Send + Sync {
    /// Identifies model and prompt rendering; part of every cache key.
    fn tag(&self) -> &str;

    fn score(&self, ex: &Example) -> Result<PerplexityScore>;
}

impl<B: ScorerBackend + ?Sized> ScorerBackend for &B {
    fn tag(&self) -> &str {
        (**self).tag()
    }

    fn score(&self, ex: &Example) -> Result<PerplexityScore> {
        (**self).score(ex)
    }
}

impl<B: ScorerBackend + ?Sized> ScorerBackend for Box<B> {
    fn tag(&self) -> &str {
        (**self).tag()
    }

    fn score(&self, ex: &Example) -> Result<PerplexityScore> {
        (**self).score(ex)
    }
}

pub fn score_example(backend: &dyn ScorerBackend, ex: &Example) -> Result<PerplexityScore> {
    backend.score(ex)
}
