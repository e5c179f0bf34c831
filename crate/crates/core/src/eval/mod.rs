//! Prompt assembly, generation, metrics and aggregated reports.

mod generate;
mod metrics;
mod run;
mod template;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::{
    estimate_tokens, generate, truncate_at_stop, EchoBackend, GenerationRequest, HttpGenerator, InferenceBackend,
};
pub use metrics::{bleu, bleu_tokens, corpus_bleu, exact_match, normalize_answer, BleuStats};
pub use run::{run_eval, DemoSource, EvalConfig, EvalOutcome, EvalReport, ExampleRow, ExampleScore, NoiseSummary, MAX_FAILURE_RATE};
pub use template::{assemble_prompt, PromptTemplate};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("template: {0}")]
    Template(String),
    #[error("demonstration or test id {0:?} does not resolve to an example")]
    UnresolvedId(String),
    #[error("exact match needs at least one reference")]
    NoReferences,
    #[error("inference backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("context overflow: {0}")]
    ContextOverflow(String),
    #[error("inference protocol error: {0}")]
    Protocol(String),
    #[error("evaluation configuration: {0}")]
    Config(String),
    #[error("{failed} of {total} examples failed (limit 5%); first: {first}")]
    TooManyFailures { failed: usize, total: usize, first: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Em,
    Bleu,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "em" => Ok(Metric::Em),
            "bleu" => Ok(Metric::Bleu),
            _ => Err(format!("unknown metric {s:?} (expected em or bleu)")),
        }
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
