use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use super::{cosine_similarity, EmbedError, EmbeddingMatrix, Result};

/// A candidate and its `k` nearest pool items, most similar first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborCluster {
    pub candidate_id: String,
    pub neighbor_ids: Vec<String>,
    pub similarities: Vec<f64>,
}

impl NeighborCluster {
    pub fn k(&self) -> usize {
        self.neighbor_ids.len()
    }

    /// Candidate followed by its neighbours.
    pub fn members(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.candidate_id.as_str()).chain(self.neighbor_ids.iter().map(String::as_str))
    }
}

/// Exact k-nearest-neighbour lookup over a fixed pool.
pub trait NeighborSearch: Send + Sync {
    /// The `k` most similar pool items other than `candidate_id`; ties go to
    /// the smaller id.
    fn knn(&self, candidate_id: &str, k: usize) -> Result<NeighborCluster>;

    fn contains(&self, id: &str) -> bool;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Orders by similarity descending, then id ascending. "Less" means better.
#[derive(Debug, Clone, Copy)]
struct Ranked<'a> {
    sim: f64,
    id: &'a str,
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.sim.total_cmp(&self.sim).then_with(|| self.id.cmp(other.id))
    }
}

/// Keeps the `k` best entries seen; returns them best first.
pub(crate) fn select_top<'a>(scored: impl Iterator<Item = (&'a str, f64)>, k: usize) -> Vec<(&'a str, f64)> {
    let mut heap: BinaryHeap<Ranked<'a>> = BinaryHeap::with_capacity(k + 1);
    for (id, sim) in scored {
        let item = Ranked { sim, id };
        if heap.len() < k {
            heap.push(item);
        } else if let Some(worst) = heap.peek() {
            if item < *worst {
                heap.pop();
                heap.push(item);
            }
        }
    }
    heap.into_sorted_vec().into_iter().map(|r| (r.id, r.sim)).collect()
}

/// Cosine kNN index. Rows are stored unit-normalised in f64.
#[derive(Debug, Clone)]
pub struct CosineIndex {
    ids: Vec<String>,
    dim: usize,
    rows: Vec<f64>,
    by_id: HashMap<String, usize>,
}

pub fn build_index(emb: &EmbeddingMatrix) -> Result<CosineIndex> {
    if emb.is_empty() {
        return Err(EmbedError::EmptyMatrix);
    }
    let dim = emb.dim();
    let mut rows = Vec::with_capacity(emb.len() * dim);
    for (i, id) in emb.ids().iter().enumerate() {
        let unit = unit(emb.row_at(i)).ok_or_else(|| EmbedError::ZeroVector(Some(id.clone())))?;
        rows.extend(unit);
    }
    let by_id = emb.ids().iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    Ok(CosineIndex { ids: emb.ids().to_vec(), dim, rows, by_id })
}

fn unit(v: &[f32]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    (norm > 0.0).then(|| v.iter().map(|&x| f64::from(x) / norm).collect())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl CosineIndex {
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    fn scan<'a>(&'a self, query: &'a [f64], skip: Option<usize>) -> impl Iterator<Item = (&'a str, f64)> + 'a {
        (0..self.ids.len())
            .filter(move |&i| Some(i) != skip)
            .map(move |i| (self.ids[i].as_str(), dot(query, self.row(i)).clamp(-1.0, 1.0)))
    }

    /// Top-`k` pool items for an arbitrary query vector, optionally skipping
    /// one id (the query's own entry, when it is in the pool).
    pub fn query_vector(&self, query: &[f32], k: usize, exclude: Option<&str>) -> Result<Vec<(String, f64)>> {
        if k == 0 {
            return Err(EmbedError::InvalidK);
        }
        if query.len() != self.dim {
            return Err(EmbedError::DimensionMismatch { expected: self.dim, got: query.len() });
        }
        let q = unit(query).ok_or(EmbedError::ZeroVector(None))?;
        let skip = exclude.and_then(|id| self.by_id.get(id).copied());
        let available = self.ids.len() - usize::from(skip.is_some());
        if available < k {
            return Err(EmbedError::NotEnoughNeighbors { requested: k, available });
        }
        Ok(select_top(self.scan(&q, skip), k).into_iter().map(|(id, s)| (id.to_string(), s)).collect())
    }

    /// Similarity of every pool item to `query`, in pool order.
    pub fn similarities(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(EmbedError::DimensionMismatch { expected: self.dim, got: query.len() });
        }
        let q = unit(query).ok_or(EmbedError::ZeroVector(None))?;
        Ok(self.scan(&q, None).map(|(_, s)| s).collect())
    }
}

impl NeighborSearch for CosineIndex {
    fn knn(&self, candidate_id: &str, k: usize) -> Result<NeighborCluster> {
        if k == 0 {
            return Err(EmbedError::InvalidK);
        }
        let c = *self.by_id.get(candidate_id).ok_or_else(|| EmbedError::UnknownId(candidate_id.into()))?;
        let available = self.ids.len() - 1;
        if available < k {
            return Err(EmbedError::NotEnoughNeighbors { requested: k, available });
        }
        let top = select_top(self.scan(self.row(c), Some(c)), k);
        Ok(NeighborCluster {
            candidate_id: candidate_id.to_string(),
            neighbor_ids: top.iter().map(|(id, _)| id.to_string()).collect(),
            similarities: top.iter().map(|(_, s)| *s).collect(),
        })
    }

    fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Reference kNN: full scan with [`cosine_similarity`] and a complete sort.
pub fn brute_force_knn(emb: &EmbeddingMatrix, candidate_id: &str, k: usize) -> Result<NeighborCluster> {
    if k == 0 {
        return Err(EmbedError::InvalidK);
    }
    let query = emb.try_row(candidate_id)?;
    if emb.len() - 1 < k {
        return Err(EmbedError::NotEnoughNeighbors { requested: k, available: emb.len() - 1 });
    }
    let mut all = Vec::with_capacity(emb.len());
    for (i, id) in emb.ids().iter().enumerate() {
        if id != candidate_id {
            all.push((cosine_similarity(query, emb.row_at(i))?, id.as_str()));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    all.truncate(k);
    Ok(NeighborCluster {
        candidate_id: candidate_id.to_string(),
        neighbor_ids: all.iter().map(|(_, id)| id.to_string()).collect(),
        similarities: all.iter().map(|(s, _)| *s).collect(),
    })
}
