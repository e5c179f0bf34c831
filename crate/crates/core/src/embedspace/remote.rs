use std::time::Duration;

use serde_json::{json, Value};

use super::{EmbedError, EmbedOn, EmbeddingMatrix, Result};
use crate::corpus::Example;
use crate::http::JsonClient;

/// Client for an OpenAI-compatible `/v1/embeddings` endpoint.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    client: JsonClient,
    model: String,
    batch_size: usize,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, model: impl Into<String>) -> Self {
        Self { client: JsonClient::new(base_url, Duration::from_secs(60)), model: model.into(), batch_size: 64 }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.client = self.client.with_api_key(key);
        self
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let body = json!({ "model": self.model, "input": texts });
        let resp = self.client.post("/v1/embeddings", &body).map_err(|e| EmbedError::Remote(e.to_string()))?;
        parse_embeddings(&resp, texts.len())
    }

    pub fn embed_examples(&self, examples: &[Example], on: EmbedOn) -> Result<EmbeddingMatrix> {
        let mut rows = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(self.batch_size) {
            let texts: Vec<String> = chunk.iter().map(|e| on.text(e)).collect();
            let vectors = self.embed(&texts)?;
            rows.extend(chunk.iter().map(|e| e.id.clone()).zip(vectors));
        }
        EmbeddingMatrix::from_rows(rows)
    }
}

fn parse_embeddings(resp: &Value, expected: usize) -> Result<Vec<Vec<f32>>> {
    let bad = |m: &str| EmbedError::Remote(m.to_string());
    let data = resp.get("data").and_then(Value::as_array).ok_or_else(|| bad("response lacks `data`"))?;
    if data.len() != expected {
        return Err(bad(&format!("asked for {expected} embeddings, got {}", data.len())));
    }
    let mut out = vec![Vec::new(); expected];
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
        let vector = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("item lacks `embedding`"))?
            .iter()
            .map(|v| v.as_f64().map(|x| x as f32).ok_or_else(|| bad("non-numeric embedding entry")))
            .collect::<Result<Vec<f32>>>()?;
        *out.get_mut(index).ok_or_else(|| bad("embedding index out of range"))? = vector;
    }
    Ok(out)
}
