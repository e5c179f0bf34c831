use std::time::Duration;

use serde_json::{json, Value};

use super::{perplexity_from_logprobs, PerplexityScore, PplOn, Result, ScoreError, ScorerBackend, TokenLogProbs};
use crate::corpus::Example;
use crate::eval::PromptTemplate;
use crate::http::{HttpFailure, JsonClient};

/// Scores by asking an OpenAI-compatible `/v1/completions` endpoint to echo
/// the rendered demonstration with per-token log-probabilities.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    client: JsonClient,
    model: String,
    template: PromptTemplate,
    on: PplOn,
    tag: String,
}

impl HttpScorer {
    pub fn new(base_url: &str, model: impl Into<String>, template: PromptTemplate, on: PplOn) -> Self {
        let model = model.into();
        let mode = match on {
            PplOn::Sequence => "sequence",
            PplOn::Output => "output",
        };
        let tag = format!("http:{model}|tpl:{}|ppl:{mode}", template.fingerprint());
        Self { client: JsonClient::new(base_url, Duration::from_secs(120)), model, template, on, tag }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.client = self.client.with_api_key(key);
        self
    }

    pub fn base_url(&self) -> &str {
        self.client.base_url()
    }
}

impl ScorerBackend for HttpScorer {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn score(&self, ex: &Example) -> Result<PerplexityScore> {
        let prompt = self.template.render_demo(&ex.input_text, &ex.output_text);
        let body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
        });
        let resp = self.client.post("/v1/completions", &body).map_err(|f| match f {
            HttpFailure::Transport(m) => ScoreError::BackendUnavailable(m),
            f if f.is_context_overflow() => ScoreError::ContextOverflow(format!("{}: {f}", ex.id)),
            f => ScoreError::Protocol(f.to_string()),
        })?;
        let min_offset = match self.on {
            PplOn::Sequence => None,
            PplOn::Output => Some(self.template.output_char_offset(&ex.input_text).ok_or_else(|| {
                ScoreError::Config("output-only perplexity needs {output} after {input} in the template".into())
            })?),
        };
        let lp = parse_logprobs(&ex.id, &resp, min_offset)?;
        perplexity_from_logprobs(&lp, &self.tag)
    }
}

/// Reads `choices[0].logprobs`. Null entries (the unconditioned first token)
/// are dropped; with `min_offset` only tokens starting at or after it count.
fn parse_logprobs(id: &str, resp: &Value, min_offset: Option<usize>) -> Result<TokenLogProbs> {
    let bad = |m: &str| ScoreError::Protocol(format!("{id}: {m}"));
    let lp = resp
        .pointer("/choices/0/logprobs")
        .filter(|v| v.is_object())
        .ok_or_else(|| bad("response lacks choices[0].logprobs"))?;
    let values = lp.get("token_logprobs").and_then(Value::as_array).ok_or_else(|| bad("missing token_logprobs"))?;
    let tokens = lp.get("tokens").and_then(Value::as_array);
    let offsets = lp.get("text_offset").and_then(Value::as_array);
    if min_offset.is_some() && offsets.is_none() {
        return Err(bad("output-only perplexity needs text_offset"));
    }
    let (mut toks, mut vals) = (Vec::new(), Vec::new());
    for (i, v) in values.iter().enumerate() {
        if v.is_null() {
            continue;
        }
        let v = v.as_f64().ok_or_else(|| bad("non-numeric log-probability"))?;
        if let (Some(min), Some(offs)) = (min_offset, offsets) {
            let off = offs.get(i).and_then(Value::as_u64).ok_or_else(|| bad("text_offset too short"))?;
            if (off as usize) < min {
                continue;
            }
        }
        let tok = tokens.and_then(|t| t.get(i)).and_then(Value::as_str).unwrap_or_default();
        toks.push(tok.to_string());
        vals.push(v);
    }
    TokenLogProbs::new(id, toks, vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp() -> Value {
        json!({"choices": [{"text": "Q: hi\nA: yo", "logprobs": {
            "tokens": ["Q", ":", " hi", "\n", "A", ":", " yo"],
            "token_logprobs": [null, -1.0, -2.0, -1.0, -1.0, -1.0, -3.0],
            "text_offset": [0, 1, 2, 5, 6, 7, 8],
        }}]})
    }

    #[test]
    fn sequence_mode_skips_leading_null() {
        let lp = parse_logprobs("a", &resp(), None).unwrap();
        assert_eq!(lp.logprobs.len(), 6);
    }

    #[test]
    fn output_mode_keeps_answer_tokens() {
        let lp = parse_logprobs("a", &resp(), Some(8)).unwrap();
        assert_eq!(lp.tokens, [" yo"]);
        assert_eq!(lp.logprobs, [-3.0]);
    }

    #[test]
    fn malformed_rejected() {
        assert!(matches!(parse_logprobs("a", &json!({"choices": []}), None), Err(ScoreError::Protocol(_))));
        let only_null = json!({"choices": [{"logprobs": {"token_logprobs": [null]}}]});
        assert!(matches!(parse_logprobs("a", &only_null, None), Err(ScoreError::EmptyLogProbs)));
    }
}
