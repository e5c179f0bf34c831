//! Minimal JSON-over-HTTP plumbing shared by the OpenAI-compatible clients.

use std::time::Duration;

use serde_json::Value;

/// Environment variable holding the bearer token for remote backends.
pub const API_KEY_ENV: &str = "ICL_FORGE_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum HttpFailure {
    /// Connection problems, timeouts, 429 and 5xx. Worth retrying.
    Transport(String),
    /// Any other non-success status.
    Status { code: u16, body: String },
    /// A 2xx response whose body is not JSON.
    Decode(String),
}

impl HttpFailure {
    /// Heuristic for servers that reject over-long prompts with a 400.
    pub(crate) fn is_context_overflow(&self) -> bool {
        match self {
            HttpFailure::Status { code: 400, body } => {
                let body = body.to_lowercase();
                body.contains("context length") || body.contains("context_length") || body.contains("maximum context")
            }
            _ => false,
        }
    }
}

impl std::fmt::Display for HttpFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HttpFailure::Transport(m) => write!(f, "transport error: {m}"),
            HttpFailure::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            HttpFailure::Decode(m) => write!(f, "undecodable response: {m}"),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct JsonClient {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
}

impl JsonClient {
    pub(crate) fn new(base_url: &str, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("TLS backend initialises");
        Self {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }

    pub(crate) fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub(crate) fn base_url(&self) -> &str {
        &self.base_url
    }

    pub(crate) fn post(&self, path: &str, body: &Value) -> Result<Value, HttpFailure> {
        let mut req = self.client.post(format!("{}{path}", self.base_url)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| HttpFailure::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| HttpFailure::Transport(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(HttpFailure::Transport(format!("HTTP {}: {text}", status.as_u16())));
        }
        if !status.is_success() {
            return Err(HttpFailure::Status { code: status.as_u16(), body: text });
        }
        serde_json::from_str(&text).map_err(|e| HttpFailure::Decode(e.to_string()))
    }
}
