//! Planted corpora: clustered embeddings with a known noise pattern and a
//! matching synthetic scorer model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_noise_indices, Dataset, Example, Split};
use crate::embedspace::EmbeddingMatrix;
use crate::scoring::SyntheticScorerModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    /// Inherent levels are drawn uniformly from this range unless `bases`
    /// is given.
    pub base_range: (f64, f64),
    pub bases: Option<Vec<f64>>,
    pub noise_shift: f64,
    pub sigma: f64,
    pub noise_rate: f64,
    /// Norm of the within-cluster offset relative to the unit centre.
    pub spread: f64,
    /// Test queries, assigned to clusters round-robin.
    pub test_queries: usize,
    pub task: String,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            clusters: 20,
            per_cluster: 50,
            dim: 32,
            base_range: (5.0, 15.0),
            bases: None,
            noise_shift: 3.0,
            sigma: 0.5,
            noise_rate: 0.4,
            spread: 0.3,
            test_queries: 20,
            task: "planted".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    /// Pool with ground-truth flags and a `cluster` meta entry per example.
    pub pool: Dataset,
    pub test: Dataset,
    /// Vectors for pool and test ids alike.
    pub embeddings: EmbeddingMatrix,
    pub model: SyntheticScorerModel,
}

impl PlantedCorpus {
    pub fn cluster_of(&self, id: &str) -> Option<&str> {
        self.pool.get(id).or_else(|| self.test.get(id)).and_then(|e| e.meta.get("cluster")).map(String::as_str)
    }
}

pub fn cluster_name(c: usize) -> String {
    format!("c{c:02}")
}

fn point(rng: &mut ChaCha8Rng, centre: &[f64], spread: f64) -> Vec<f32> {
    let dim = centre.len() as f64;
    centre.iter().map(|c| (c + spread * rng.sample::<f64, _>(StandardNormal) / dim.sqrt()) as f32).collect()
}

/// Clean pool plus planted noise: exactly round(rate * N) outputs are
/// swapped for an answer from another cluster.
pub fn planted_corpus(cfg: &PlantedConfig) -> PlantedCorpus {
    assert!(cfg.clusters >= 1 && cfg.per_cluster >= 1 && cfg.dim >= 1, "degenerate planted corpus");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centres: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let bases: Vec<f64> = match &cfg.bases {
        Some(b) => {
            assert_eq!(b.len(), cfg.clusters, "one base per cluster");
            b.clone()
        }
        None => (0..cfg.clusters).map(|_| rng.random_range(cfg.base_range.0..=cfg.base_range.1)).collect(),
    };

    let mut examples = Vec::with_capacity(cfg.clusters * cfg.per_cluster);
    let mut rows = Vec::with_capacity(examples.capacity() + cfg.test_queries);
    for (c, centre) in centres.iter().enumerate() {
        for j in 0..cfg.per_cluster {
            let id = format!("p-{}-{j:03}", cluster_name(c));
            examples.push(
                Example::new(&id, &cfg.task, format!("question {c} {j}"), format!("answer {c} {j}"))
                    .with_meta("cluster", cluster_name(c)),
            );
            rows.push((id, point(&mut rng, centre, cfg.spread)));
        }
    }

    let noisy_at = sample_noise_indices(examples.len(), cfg.noise_rate, cfg.seed ^ 0x5eed);
    let mut flags = vec![false; examples.len()];
    for &i in &noisy_at {
        flags[i] = true;
        if cfg.clusters > 1 {
            let own = i / cfg.per_cluster;
            let other = (own + rng.random_range(1..cfg.clusters)) % cfg.clusters;
            let j = rng.random_range(0..cfg.per_cluster);
            examples[i].output_text = format!("answer {other} {j}");
        } else {
            examples[i].output_text = format!("wrong {i}");
        }
    }

    let mut tests = Vec::with_capacity(cfg.test_queries);
    for t in 0..cfg.test_queries {
        let c = t % cfg.clusters;
        let id = format!("t-{}-{t:03}", cluster_name(c));
        tests.push(
            Example::new(&id, &cfg.task, format!("query {c} {t}"), format!("answer {c} q{t}")).with_meta("cluster", cluster_name(c)),
        );
        rows.push((id, point(&mut rng, &centres[c], cfg.spread)));
    }

    let model = SyntheticScorerModel {
        cluster_base: bases.iter().enumerate().map(|(c, b)| (cluster_name(c), *b)).collect::<BTreeMap<_, _>>(),
        noise_shift: cfg.noise_shift,
        sigma: cfg.sigma,
        seed: cfg.seed,
    };
    PlantedCorpus {
        pool: Dataset::with_ground_truth(examples, flags, Split::Pool).expect("planted ids are unique"),
        test: Dataset::new(tests, Split::Test).expect("planted ids are unique"),
        embeddings: EmbeddingMatrix::from_rows(rows).expect("planted vectors are finite"),
        model,
    }
}
