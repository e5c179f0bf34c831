use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PerplexityScore, Result, ScoreError, ScorerBackend};
use crate::corpus::{Dataset, Example};

/// Meta key that assigns an example to a planted cluster.
pub const CLUSTER_META_KEY: &str = "cluster";

/// Precomputed scores read from `{id, perplexity, backend_tag}` lines.
#[derive(Debug, Clone)]
pub struct FileScorer {
    tag: String,
    scores: HashMap<String, f64>,
}

impl FileScorer {
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut scores = HashMap::new();
        let mut tag: Option<String> = None;
        for (i, line) in reader.lines().enumerate() {
            let bad = |m: String| ScoreError::Config(format!("score file line {}: {m}", i + 1));
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PerplexityScore = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if !(rec.perplexity > 0.0 && rec.perplexity.is_finite()) {
                return Err(bad(format!("perplexity {} must be positive", rec.perplexity)));
            }
            match &tag {
                None => tag = Some(rec.backend_tag.clone()),
                Some(t) if *t != rec.backend_tag => {
                    return Err(bad(format!("mixed backend tags {t:?} and {:?}", rec.backend_tag)))
                }
                Some(_) => {}
            }
            if scores.insert(rec.example_id.clone(), rec.perplexity).is_some() {
                return Err(bad(format!("duplicate id {:?}", rec.example_id)));
            }
        }
        let tag = tag.filter(|t| !t.is_empty()).unwrap_or_else(|| "file".to_string());
        Ok(Self { tag, scores })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| ScoreError::Config(format!("cannot open {}: {e}", path.display())))?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl ScorerBackend for FileScorer {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn score(&self, ex: &Example) -> Result<PerplexityScore> {
        let p = self.scores.get(&ex.id).ok_or_else(|| ScoreError::NoScore(ex.id.clone()))?;
        Ok(PerplexityScore { example_id: ex.id.clone(), perplexity: *p, backend_tag: self.tag.clone() })
    }
}

/// Planted perplexity model: a per-cluster inherent level, a fixed shift for
/// mislabeled examples, and seeded Gaussian jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScorerModel {
    pub cluster_base: BTreeMap<String, f64>,
    pub noise_shift: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl SyntheticScorerModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_shift >= 0.0) || !(self.sigma >= 0.0) {
            return Err(ScoreError::Config("noise_shift and sigma must be >= 0".into()));
        }
        if self.cluster_base.values().any(|b| !b.is_finite()) {
            return Err(ScoreError::Config("cluster bases must be finite".into()));
        }
        Ok(())
    }

    /// Standard-normal draw fixed by `(id, seed)`.
    pub fn jitter(&self, id: &str) -> f64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(id.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes));
        StandardNormal.sample(&mut rng)
    }

    /// Perplexity for an example of `cluster`; never below 1.
    pub fn perplexity(&self, id: &str, cluster: &str, noisy: bool) -> Result<f64> {
        let base = self
            .cluster_base
            .get(cluster)
            .ok_or_else(|| ScoreError::Config(format!("no inherent level for cluster {cluster:?}")))?;
        let shift = if noisy { self.noise_shift } else { 0.0 };
        Ok((base + shift + self.sigma * self.jitter(id)).max(1.0))
    }
}

/// Scores examples with a [`SyntheticScorerModel`]. It is the one backend
/// that legitimately reads ground-truth noise flags: it plays the model.
#[derive(Debug, Clone)]
pub struct SyntheticScorer {
    model: SyntheticScorerModel,
    clusters: HashMap<String, String>,
    noisy: HashSet<String>,
    tag: String,
}

impl SyntheticScorer {
    pub fn new(model: SyntheticScorerModel, clusters: HashMap<String, String>, noisy: HashSet<String>) -> Result<Self> {
        model.validate()?;
        if let Some((id, c)) = clusters.iter().find(|(_, c)| !model.cluster_base.contains_key(*c)) {
            return Err(ScoreError::Config(format!("example {id:?} is in cluster {c:?}, which has no base level")));
        }
        let mut h = Sha256::new();
        for (c, b) in &model.cluster_base {
            h.update(c.as_bytes());
            h.update(b.to_le_bytes());
        }
        let tag = format!(
            "synthetic:shift={}:sigma={}:seed={}:bases={}",
            model.noise_shift,
            model.sigma,
            model.seed,
            hex::encode(&h.finalize()[..4])
        );
        Ok(Self { model, clusters, noisy, tag })
    }

    /// Cluster membership from each example's `cluster` meta entry; noise
    /// from the dataset's ground truth (all clean when absent).
    pub fn from_dataset(model: SyntheticScorerModel, dataset: &Dataset) -> Result<Self> {
        let mut clusters = HashMap::with_capacity(dataset.len());
        for ex in dataset.examples() {
            let c = ex
                .meta
                .get(CLUSTER_META_KEY)
                .ok_or_else(|| ScoreError::Config(format!("example {:?} lacks meta.{CLUSTER_META_KEY}", ex.id)))?;
            clusters.insert(ex.id.clone(), c.clone());
        }
        let noisy = dataset
            .ground_truth()
            .map(|t| t.noisy_ids().map(str::to_string).collect())
            .unwrap_or_default();
        Self::new(model, clusters, noisy)
    }

    pub fn model(&self) -> &SyntheticScorerModel {
        &self.model
    }
}

impl ScorerBackend for SyntheticScorer {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn score(&self, ex: &Example) -> Result<PerplexityScore> {
        let cluster = self.clusters.get(&ex.id).ok_or_else(|| ScoreError::NoScore(ex.id.clone()))?;
        let p = self.model.perplexity(&ex.id, cluster, self.noisy.contains(&ex.id))?;
        Ok(PerplexityScore { example_id: ex.id.clone(), perplexity: p, backend_tag: self.tag.clone() })
    }
}
