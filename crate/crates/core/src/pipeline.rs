//! Per-test selection (selector, then LPR or global ranking) and the
//! scoring-cost comparison between local and global ranking.

use std::collections::{BTreeSet, HashSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, Pool};
use crate::embedspace::{CosineIndex, EmbeddingMatrix, NeighborSearch};
use crate::lpr::{global_rank_filter, lpr_filter, reorder_by_similarity, LprConfig, LprError, ScoreLookup, SubstitutionRecord};
use crate::selectors::{candidate_set, select, DemonstrationSet, SelectError, SelectorConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Lpr(#[from] LprError),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
}

/// What to do after the base selector.
#[derive(Debug, Clone, PartialEq)]
pub enum Filter {
    None,
    Lpr(LprConfig),
    GlobalRank { reorder: bool },
}

pub struct SelectionPlan<'a> {
    pub pool: Pool<'a>,
    /// Cosine index over the pool, used by the selectors.
    pub index: &'a CosineIndex,
    pub emb: &'a EmbeddingMatrix,
    /// Neighbour search for LPR clusters (cosine or BM25).
    pub neighbors: &'a dyn NeighborSearch,
    pub scores: Option<&'a dyn ScoreLookup>,
    pub selector: SelectorConfig,
    pub filter: Filter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub raw: DemonstrationSet,
    pub set: DemonstrationSet,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<SubstitutionRecord>,
}

impl<'a> SelectionPlan<'a> {
    /// Same plan with another selector configuration.
    pub fn reseeded(&self, selector: SelectorConfig) -> SelectionPlan<'a> {
        SelectionPlan {
            pool: self.pool,
            index: self.index,
            emb: self.emb,
            neighbors: self.neighbors,
            scores: self.scores,
            selector,
            filter: self.filter.clone(),
        }
    }

    pub fn select(&self, test: &Example) -> Result<Selection, PipelineError> {
        let raw = select(self.pool, self.index, self.emb, test, &self.selector)?;
        let need_scores = || {
            self.scores.ok_or_else(|| PipelineError::Config("this filter needs a perplexity scorer".into()))
        };
        match &self.filter {
            Filter::None => Ok(Selection { set: raw.clone(), raw, records: Vec::new() }),
            Filter::Lpr(cfg) => {
                let out = lpr_filter(&raw, self.neighbors, need_scores()?, Some(self.emb), cfg)?;
                Ok(Selection { raw, set: out.set, records: out.records })
            }
            Filter::GlobalRank { reorder } => {
                let candidates: Vec<String> =
                    candidate_set(self.index, self.emb, test, &self.selector)?.into_iter().map(|(id, _)| id).collect();
                let mut set = global_rank_filter(&test.id, &candidates, need_scores()?, self.selector.k_demos)?;
                if *reorder {
                    set = reorder_by_similarity(&set, self.emb)?;
                }
                Ok(Selection { raw, set, records: Vec::new() })
            }
        }
    }
}

/// Records which ids each lookup asked for.
pub struct RecordingLookup<'a> {
    inner: &'a dyn ScoreLookup,
    requested: Mutex<Vec<String>>,
}

impl<'a> RecordingLookup<'a> {
    pub fn new(inner: &'a dyn ScoreLookup) -> Self {
        Self { inner, requested: Mutex::new(Vec::new()) }
    }

    /// Distinct ids requested since the last call, then resets.
    pub fn take_distinct(&self) -> BTreeSet<String> {
        std::mem::take(&mut *self.requested.lock().expect("recording lock")).into_iter().collect()
    }
}

impl ScoreLookup for RecordingLookup<'_> {
    fn lookup(&self, ids: &[String]) -> crate::lpr::Result<std::collections::BTreeMap<String, f64>> {
        self.requested.lock().expect("recording lock").extend(ids.iter().cloned());
        self.inner.lookup(ids)
    }
}

/// Scoring demand of one ranking strategy over a set of test inputs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringDemand {
    /// Sum over tests of the distinct ids each test needed.
    pub per_test_requests: usize,
    /// Distinct ids over the whole run, i.e. backend calls with a cache.
    pub unique_requests: usize,
}

/// Scoring demand of LPR and of global ranking on the same selections.
/// LPR runs on the raw selector output; global ranking scores the M-item
/// similarity pre-filter. Each side asks its own lookup, so separate caches
/// give separate backend-call counts.
pub fn scoring_demand(
    plan: &SelectionPlan<'_>,
    lpr: &LprConfig,
    tests: &[Example],
    local_scores: &dyn ScoreLookup,
    global_scores: &dyn ScoreLookup,
) -> Result<(ScoringDemand, ScoringDemand), PipelineError> {
    let local_rec = RecordingLookup::new(local_scores);
    let global_rec = RecordingLookup::new(global_scores);
    let mut local = ScoringDemand::default();
    let mut global = ScoringDemand::default();
    let mut local_all: HashSet<String> = HashSet::new();
    let mut global_all: HashSet<String> = HashSet::new();
    for test in tests {
        let raw = select(plan.pool, plan.index, plan.emb, test, &plan.selector)?;
        lpr_filter(&raw, plan.neighbors, &local_rec, None, &LprConfig { reorder: false, ..lpr.clone() })?;
        let asked = local_rec.take_distinct();
        local.per_test_requests += asked.len();
        local_all.extend(asked);

        let candidates: Vec<String> =
            candidate_set(plan.index, plan.emb, test, &plan.selector)?.into_iter().map(|(id, _)| id).collect();
        global_rank_filter(&test.id, &candidates, &global_rec, plan.selector.k_demos)?;
        let asked = global_rec.take_distinct();
        global.per_test_requests += asked.len();
        global_all.extend(asked);
    }
    local.unique_requests = local_all.len();
    global.unique_requests = global_all.len();
    Ok((local, global))
}
