//! Okapi BM25 over bag-of-words token lists.
//!
//! IDF is the Robertson/Sparck-Jones estimate with 0.5 smoothing, shifted by
//! one inside the log so it stays non-negative for very common terms.

use std::collections::HashMap;

use super::index::{select_top, NeighborCluster, NeighborSearch};
use super::{EmbedError, Result};

/// Lowercase, split on whitespace, drop non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub doc_freqs: HashMap<String, usize>,
    pub avg_doc_len: f64,
    pub corpus_size: usize,
}

impl Default for Bm25Params {
    /// Unfitted parameters with the usual `k1 = 1.2`, `b = 0.75`.
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75, doc_freqs: HashMap::new(), avg_doc_len: 0.0, corpus_size: 0 }
    }
}

impl Bm25Params {
    pub fn fit<S: AsRef<str>>(docs: &[Vec<S>]) -> Self {
        Self::default().refit(docs)
    }

    /// Recomputes corpus statistics, keeping `k1` and `b`.
    pub fn refit<S: AsRef<str>>(mut self, docs: &[Vec<S>]) -> Self {
        let mut doc_freqs: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for doc in docs {
            total += doc.len();
            let mut seen: Vec<&str> = doc.iter().map(AsRef::as_ref).collect();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *doc_freqs.entry(t.to_string()).or_default() += 1;
            }
        }
        self.doc_freqs = doc_freqs;
        self.corpus_size = docs.len();
        self.avg_doc_len = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        self
    }

    pub fn with_k1_b(mut self, k1: f64, b: f64) -> Self {
        self.k1 = k1;
        self.b = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus_size == 0 {
            return Err(EmbedError::UnfittedParams);
        }
        if !(self.k1 >= 0.0) {
            return Err(EmbedError::InvalidParams(format!("k1 = {} must be >= 0", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(EmbedError::InvalidParams(format!("b = {} must lie in [0, 1]", self.b)));
        }
        Ok(())
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.corpus_size as f64;
        let df = self.doc_freqs.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

/// Sum over query tokens of `IDF(q) * tf (k1 + 1) / (tf + k1 (1 - b + b |d| / avgdl))`.
pub fn bm25_score<S: AsRef<str>, T: AsRef<str>>(query: &[S], doc: &[T], params: &Bm25Params) -> Result<f64> {
    params.validate()?;
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in doc {
        *tf.entry(t.as_ref()).or_default() += 1;
    }
    let norm = if params.avg_doc_len > 0.0 { doc.len() as f64 / params.avg_doc_len } else { 0.0 };
    let saturation = params.k1 * (1.0 - params.b + params.b * norm);
    let mut score = 0.0;
    for q in query {
        let Some(&f) = tf.get(q.as_ref()) else { continue };
        let f = f as f64;
        score += params.idf(q.as_ref()) * f * (params.k1 + 1.0) / (f + saturation);
    }
    Ok(score)
}

/// kNN where similarity is the BM25 score of the candidate's tokens (as the
/// query) against every other document.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    docs: Vec<Vec<String>>,
    by_id: HashMap<String, usize>,
    params: Bm25Params,
}

impl Bm25Index {
    pub fn build<I, S, T>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        Self::with_params(docs, Bm25Params::default())
    }

    pub fn with_params<I, S, T>(docs: I, params: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut ids = Vec::new();
        let mut tokens = Vec::new();
        let mut by_id = HashMap::new();
        for (id, text) in docs {
            let id = id.into();
            if by_id.insert(id.clone(), ids.len()).is_some() {
                return Err(EmbedError::DuplicateId(id));
            }
            ids.push(id);
            tokens.push(tokenize(text.as_ref()));
        }
        if ids.is_empty() {
            return Err(EmbedError::EmptyMatrix);
        }
        let params = params.refit(&tokens);
        params.validate()?;
        Ok(Self { ids, docs: tokens, by_id, params })
    }

    pub fn params(&self) -> &Bm25Params {
        &self.params
    }

    /// Top-`k` documents for free text, skipping `exclude` if given.
    pub fn query_text(&self, text: &str, k: usize, exclude: Option<&str>) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(EmbedError::InvalidK);
        }
        let q = tokenize(text);
        let skip = exclude.and_then(|id| self.by_id.get(id).copied());
        let available = self.ids.len() - usize::from(skip.is_some());
        if available < k {
            return Err(EmbedError::NotEnoughNeighbors { requested: k, available });
        }
        self.rank(&q, skip, k)
    }

    fn rank(&self, query: &[String], skip: Option<usize>, k: usize) -> Result<Vec<(String, f64)>> {
        let mut scored = Vec::with_capacity(self.ids.len());
        for (i, doc) in self.docs.iter().enumerate() {
            if Some(i) != skip {
                scored.push((self.ids[i].as_str(), bm25_score(query, doc, &self.params)?));
            }
        }
        Ok(select_top(scored.into_iter(), k).into_iter().map(|(id, s)| (id.to_string(), s)).collect())
    }
}

impl NeighborSearch for Bm25Index {
    fn knn(&self, candidate_id: &str, k: usize) -> Result<NeighborCluster> {
        if k == 0 {
            return Err(EmbedError::InvalidK);
        }
        let c = *self.by_id.get(candidate_id).ok_or_else(|| EmbedError::UnknownId(candidate_id.into()))?;
        if self.ids.len() - 1 < k {
            return Err(EmbedError::NotEnoughNeighbors { requested: k, available: self.ids.len() - 1 });
        }
        let top = self.rank(&self.docs[c], Some(c), k)?;
        Ok(NeighborCluster {
            candidate_id: candidate_id.to_string(),
            neighbor_ids: top.iter().map(|(id, _)| id.clone()).collect(),
            similarities: top.into_iter().map(|(_, s)| s).collect(),
        })
    }

    fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}
