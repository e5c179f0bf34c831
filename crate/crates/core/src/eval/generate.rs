use std::collections::HashMap;
use std::time::Duration;

use serde_json::{json, Value};

use super::EvalError;
use crate::http::{HttpFailure, JsonClient};

/// One greedy completion request.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest<'a> {
    /// Test example the prompt was built for; only test doubles look at it.
    pub test_id: &'a str,
    pub prompt: &'a str,
    pub max_tokens: usize,
    pub stop: &'a [String],
}

pub trait InferenceBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Raw completion text; [`generate`] applies stop truncation.
    fn complete(&self, req: &GenerationRequest<'_>) -> Result<String, EvalError>;
}

/// Greedy completion cut at the first stop sequence.
pub fn generate(backend: &dyn InferenceBackend, req: &GenerationRequest<'_>) -> Result<String, EvalError> {
    let text = backend.complete(req)?;
    Ok(truncate_at_stop(&text, req.stop).to_string())
}

pub fn truncate_at_stop<'t>(text: &'t str, stop: &[String]) -> &'t str {
    let cut = stop.iter().filter(|s| !s.is_empty()).filter_map(|s| text.find(s.as_str())).min();
    &text[..cut.unwrap_or(text.len())]
}

/// Test double addressed as `echo:reference`, `echo:empty`,
/// `echo:const:<text>` or `echo:fail`.
#[derive(Debug, Clone)]
pub enum EchoBackend {
    /// Returns the first reference of the test example.
    Reference(HashMap<String, String>),
    Const(String),
    Fail,
}

impl EchoBackend {
    pub fn from_uri(uri: &str, references: HashMap<String, String>) -> Result<Self, EvalError> {
        let rest = uri
            .strip_prefix("echo:")
            .ok_or_else(|| EvalError::Config(format!("{uri:?} is not an echo: URI")))?;
        match rest {
            "reference" => Ok(Self::Reference(references)),
            "empty" => Ok(Self::Const(String::new())),
            "fail" => Ok(Self::Fail),
            _ => rest
                .strip_prefix("const:")
                .map(|t| Self::Const(t.to_string()))
                .ok_or_else(|| EvalError::Config(format!("unknown echo backend {uri:?}"))),
        }
    }
}

impl InferenceBackend for EchoBackend {
    fn name(&self) -> &str {
        match self {
            Self::Reference(_) => "echo:reference",
            Self::Const(_) => "echo:const",
            Self::Fail => "echo:fail",
        }
    }

    fn complete(&self, req: &GenerationRequest<'_>) -> Result<String, EvalError> {
        match self {
            Self::Reference(refs) => refs
                .get(req.test_id)
                .cloned()
                .ok_or_else(|| EvalError::UnresolvedId(req.test_id.to_string())),
            Self::Const(t) => Ok(t.clone()),
            Self::Fail => Err(EvalError::BackendUnavailable("echo:fail always fails".into())),
        }
    }
}

/// Greedy decoding against an OpenAI-compatible `/v1/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    client: JsonClient,
    model: String,
    context_window: Option<usize>,
    name: String,
}

impl HttpGenerator {
    pub fn new(base_url: &str, model: impl Into<String>) -> Self {
        let model = model.into();
        let name = format!("http:{model}");
        Self { client: JsonClient::new(base_url, Duration::from_secs(120)), model, context_window: None, name }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.client = self.client.with_api_key(key);
        self
    }

    /// Rejects prompts whose estimated length plus `max_tokens` exceeds
    /// `tokens`, without contacting the server.
    pub fn with_context_window(mut self, tokens: usize) -> Self {
        self.context_window = Some(tokens);
        self
    }
}

/// Conservative prompt length estimate: whitespace-separated words.
pub fn estimate_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

impl InferenceBackend for HttpGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, req: &GenerationRequest<'_>) -> Result<String, EvalError> {
        if let Some(window) = self.context_window {
            let needed = estimate_tokens(req.prompt) + req.max_tokens;
            if needed > window {
                return Err(EvalError::ContextOverflow(format!(
                    "{}: ~{needed} tokens exceed the {window}-token window",
                    req.test_id
                )));
            }
        }
        let body = json!({
            "model": self.model,
            "prompt": req.prompt,
            "max_tokens": req.max_tokens,
            "temperature": 0,
            "stop": req.stop,
        });
        let resp = self.client.post("/v1/completions", &body).map_err(|f| match f {
            HttpFailure::Transport(m) => EvalError::BackendUnavailable(m),
            f if f.is_context_overflow() => EvalError::ContextOverflow(f.to_string()),
            f => EvalError::Protocol(f.to_string()),
        })?;
        resp.pointer("/choices/0/text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| EvalError::Protocol("response lacks choices[0].text".into()))
    }
}
