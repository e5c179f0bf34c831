//! Baseline demonstration selection: Random, TopK and DPP (greedy MAP).

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Example, Pool};
use crate::embedspace::{build_index, CosineIndex, EmbedError, EmbeddingMatrix};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("pool has {available} eligible examples; {needed} requested")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("DPP kernel is not positive semi-definite even after jitter {jitter}")]
    KernelNotPsd { jitter: f64 },
    #[error("non-positive pivot {pivot} while adding {id:?}")]
    NumericalBreakdown { id: String, pivot: f64 },
    #[error("no perplexity score for {0:?}")]
    MissingScore(Vec<String>),
    #[error("invalid selector configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub type Result<T, E = SelectError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorMethod {
    Random,
    #[default]
    Topk,
    Dpp,
}

impl std::str::FromStr for SelectorMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "topk" => Ok(Self::Topk),
            "dpp" => Ok(Self::Dpp),
            _ => Err(format!("unknown selector {s:?} (expected random, topk or dpp)")),
        }
    }
}

impl SelectorMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Topk => "topk",
            Self::Dpp => "dpp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub method: SelectorMethod,
    /// K, the number of demonstrations.
    pub k_demos: usize,
    /// M, the similarity pre-filter size for DPP and global ranking.
    pub candidate_pool_size: usize,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self { method: SelectorMethod::Topk, k_demos: 8, candidate_pool_size: 100, seed: 0 }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_demos == 0 {
            return Err(SelectError::InvalidConfig("k_demos must be >= 1".into()));
        }
        if self.candidate_pool_size < self.k_demos {
            return Err(SelectError::InvalidConfig(format!(
                "candidate pool size {} is smaller than k_demos {}",
                self.candidate_pool_size, self.k_demos
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Raw,
    LprFiltered,
    GlobalFiltered,
}

/// Ordered demonstrations chosen for one test example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub test_id: String,
    pub demo_ids: Vec<String>,
    pub provenance: Provenance,
    /// Diagonal jitter the DPP kernel needed, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dpp_jitter: Option<f64>,
}

impl DemonstrationSet {
    pub fn raw(test_id: impl Into<String>, demo_ids: Vec<String>) -> Self {
        Self { test_id: test_id.into(), demo_ids, provenance: Provenance::Raw, dpp_jitter: None }
    }

    pub fn len(&self) -> usize {
        self.demo_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demo_ids.is_empty()
    }
}

/// Per-test seed derived from a run seed, so test order does not matter.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&h.finalize()[..8]);
    u64::from_le_bytes(b)
}

/// Cosine index over exactly the pool's examples.
pub fn build_pool_index(pool: Pool<'_>, emb: &EmbeddingMatrix) -> Result<CosineIndex> {
    let ids: Vec<&str> = pool.ids().collect();
    if let Some(missing) = ids.iter().find(|id| !emb.contains(id)) {
        return Err(SelectError::MissingEmbedding(missing.to_string()));
    }
    Ok(build_index(&emb.subset(&ids)?)?)
}

/// K distinct pool ids drawn uniformly without replacement, in draw order.
pub fn select_random(pool: Pool<'_>, test_id: &str, cfg: &SelectorConfig) -> Result<DemonstrationSet> {
    cfg.validate()?;
    let eligible: Vec<&str> = pool.ids().filter(|id| *id != test_id).collect();
    if eligible.len() < cfg.k_demos {
        return Err(SelectError::PoolTooSmall { needed: cfg.k_demos, available: eligible.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks = index::sample(&mut rng, eligible.len(), cfg.k_demos);
    Ok(DemonstrationSet::raw(test_id, picks.into_iter().map(|i| eligible[i].to_string()).collect()))
}

fn test_vector<'e>(emb: &'e EmbeddingMatrix, test: &Example) -> Result<&'e [f32]> {
    emb.row(&test.id).ok_or_else(|| SelectError::MissingEmbedding(test.id.clone()))
}

/// The `m` pool items most similar to the test input, best first, ties by
/// ascending id.
pub fn nearest_to_test(index: &CosineIndex, emb: &EmbeddingMatrix, test: &Example, m: usize) -> Result<Vec<(String, f64)>> {
    let v = test_vector(emb, test)?;
    index.query_vector(v, m, Some(&test.id)).map_err(|e| match e {
        EmbedError::NotEnoughNeighbors { requested, available } => SelectError::PoolTooSmall { needed: requested, available },
        e => e.into(),
    })
}

/// Similarity pre-filter of size min(M, eligible pool), at least K.
pub fn candidate_set(index: &CosineIndex, emb: &EmbeddingMatrix, test: &Example, cfg: &SelectorConfig) -> Result<Vec<(String, f64)>> {
    cfg.validate()?;
    let eligible = index.ids().len() - usize::from(index.ids().iter().any(|id| *id == test.id));
    if eligible < cfg.k_demos {
        return Err(SelectError::PoolTooSmall { needed: cfg.k_demos, available: eligible });
    }
    nearest_to_test(index, emb, test, cfg.candidate_pool_size.min(eligible))
}

/// The K pool items most similar to the test input, most similar first.
pub fn select_topk(index: &CosineIndex, emb: &EmbeddingMatrix, test: &Example, cfg: &SelectorConfig) -> Result<DemonstrationSet> {
    cfg.validate()?;
    let top = nearest_to_test(index, emb, test, cfg.k_demos)?;
    Ok(DemonstrationSet::raw(&test.id, top.into_iter().map(|(id, _)| id).collect()))
}

/// Regularisation added to the kernel diagonal when greedy MAP hits a
/// singular pivot.
pub const DPP_JITTER: f64 = 1e-8;
const PIVOT_FLOOR: f64 = 1e-12;

/// `L = diag(q) S diag(q)` over unit-normalised embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DppKernel {
    pub item_ids: Vec<String>,
    /// Row-major M×M.
    pub matrix: Vec<f64>,
    pub jitter: f64,
}

impl DppKernel {
    pub fn from_matrix(item_ids: Vec<String>, matrix: Vec<f64>) -> Result<Self> {
        let m = item_ids.len();
        if matrix.len() != m * m {
            return Err(SelectError::InvalidConfig(format!("kernel has {} entries for {m} items", matrix.len())));
        }
        Ok(Self { item_ids, matrix, jitter: 0.0 })
    }

    pub fn size(&self) -> usize {
        self.item_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.size() + j] + if i == j { self.jitter } else { 0.0 }
    }

    pub fn with_jitter(mut self, eps: f64) -> Self {
        self.jitter = eps;
        self
    }
}

pub fn build_dpp_kernel<S: AsRef<str>>(
    emb: &EmbeddingMatrix,
    candidate_ids: &[S],
    quality: Option<&HashMap<String, f64>>,
) -> Result<DppKernel> {
    let mut rows = Vec::with_capacity(candidate_ids.len());
    let mut q = Vec::with_capacity(candidate_ids.len());
    for id in candidate_ids {
        let id = id.as_ref();
        let v = emb.row(id).ok_or_else(|| SelectError::MissingEmbedding(id.to_string()))?;
        let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::ZeroVector(Some(id.to_string())).into());
        }
        rows.push(v.iter().map(|&x| f64::from(x) / norm).collect::<Vec<f64>>());
        q.push(match quality {
            Some(w) => *w.get(id).ok_or_else(|| SelectError::MissingScore(vec![id.to_string()]))?,
            None => 1.0,
        });
    }
    let m = rows.len();
    let mut matrix = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let v = q[i] * s * q[j];
            matrix[i * m + j] = v;
            matrix[j * m + i] = v;
        }
    }
    DppKernel::from_matrix(candidate_ids.iter().map(|s| s.as_ref().to_string()).collect(), matrix)
}

/// Selection order and the log-det gain of each step.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyMap {
    pub ids: Vec<String>,
    pub gains: Vec<f64>,
}

/// Greedy MAP for `log det(L_S)` with incremental Cholesky updates. Each
/// step adds the item with the largest residual variance `d_i^2`; its gain
/// is `ln d_i^2`. Ties go to the smaller id.
pub fn greedy_map_logdet(kernel: &DppKernel, k: usize) -> Result<GreedyMap> {
    let m = kernel.size();
    if k > m {
        return Err(SelectError::PoolTooSmall { needed: k, available: m });
    }
    let max_diag = (0..m).map(|i| kernel.get(i, i)).fold(0.0f64, f64::max);
    let floor = PIVOT_FLOOR * max_diag.max(f64::MIN_POSITIVE);
    let mut d2: Vec<f64> = (0..m).map(|i| kernel.get(i, i)).collect();
    let mut c: Vec<Vec<f64>> = vec![Vec::with_capacity(k); m];
    let mut taken = vec![false; m];
    let mut out = GreedyMap { ids: Vec::with_capacity(k), gains: Vec::with_capacity(k) };
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in (0..m).filter(|&i| !taken[i]) {
            best = match best {
                None => Some(i),
                Some(b) if d2[i] > d2[b] || (d2[i] == d2[b] && kernel.item_ids[i] < kernel.item_ids[b]) => Some(i),
                keep => keep,
            };
        }
        let j = best.expect("k <= m leaves an untaken item");
        let pivot = d2[j];
        if !(pivot > floor) {
            return Err(SelectError::NumericalBreakdown { id: kernel.item_ids[j].clone(), pivot });
        }
        taken[j] = true;
        out.ids.push(kernel.item_ids[j].clone());
        out.gains.push(pivot.ln());
        let dj = pivot.sqrt();
        let cj = c[j].clone();
        for i in (0..m).filter(|&i| !taken[i]) {
            let dot: f64 = cj.iter().zip(&c[i]).map(|(a, b)| a * b).sum();
            let e = (kernel.get(j, i) - dot) / dj;
            c[i].push(e);
            d2[i] -= e * e;
        }
    }
    Ok(out)
}

/// Greedy MAP, retrying once with [`DPP_JITTER`] on the diagonal.
pub fn greedy_map_with_repair(kernel: DppKernel, k: usize) -> Result<(GreedyMap, Option<f64>)> {
    match greedy_map_logdet(&kernel, k) {
        Ok(g) => Ok((g, None)),
        Err(SelectError::NumericalBreakdown { .. }) => {
            let jittered = kernel.with_jitter(DPP_JITTER);
            match greedy_map_logdet(&jittered, k) {
                Ok(g) => Ok((g, Some(DPP_JITTER))),
                Err(SelectError::NumericalBreakdown { .. }) => Err(SelectError::KernelNotPsd { jitter: DPP_JITTER }),
                Err(e) => Err(e),
            }
        }
        Err(e) => Err(e),
    }
}

/// TopK pre-filter to M candidates, then greedy MAP over their kernel.
pub fn select_dpp(index: &CosineIndex, emb: &EmbeddingMatrix, test: &Example, cfg: &SelectorConfig) -> Result<DemonstrationSet> {
    let candidates: Vec<String> = candidate_set(index, emb, test, cfg)?.into_iter().map(|(id, _)| id).collect();
    let kernel = build_dpp_kernel(emb, &candidates, None)?;
    let (map, jitter) = greedy_map_with_repair(kernel, cfg.k_demos)?;
    Ok(DemonstrationSet { dpp_jitter: jitter, ..DemonstrationSet::raw(&test.id, map.ids) })
}

/// Dispatches on `cfg.method`. Random draws are seeded per test id.
pub fn select(
    pool: Pool<'_>,
    index: &CosineIndex,
    emb: &EmbeddingMatrix,
    test: &Example,
    cfg: &SelectorConfig,
) -> Result<DemonstrationSet> {
    match cfg.method {
        SelectorMethod::Random => {
            let per_test = SelectorConfig { seed: derive_seed(cfg.seed, &test.id), ..cfg.clone() };
            select_random(pool, &test.id, &per_test)
        }
        SelectorMethod::Topk => select_topk(index, emb, test, cfg),
        SelectorMethod::Dpp => select_dpp(index, emb, test, cfg),
    }
}
