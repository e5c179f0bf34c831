//! Local perplexity ranking.
//!
//! Each candidate demonstration is ranked by perplexity against its `k`
//! nearest pool neighbours. Neighbours share most of the task difficulty, so
//! a candidate sitting near the top of its own neighbourhood is likely
//! mislabeled. Flagged candidates are swapped for their nearest unflagged
//! neighbour.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Pool;
use crate::embedspace::{cosine_similarity, EmbedError, EmbeddingMatrix, NeighborCluster, NeighborSearch};
use crate::scoring::{batch_score, RetryPolicy, ScoreCache, ScoreError, ScorerBackend};
use crate::selectors::{DemonstrationSet, Provenance};

#[derive(Debug, Error)]
pub enum LprError {
    #[error("missing perplexity for {0:?}")]
    MissingScore(Vec<String>),
    #[error("missing class label for {0:?}")]
    MissingLabel(String),
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("invalid LPR configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub type Result<T, E = LprError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBase {
    #[default]
    ZeroBased,
    OneBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LprSimilarity {
    #[default]
    Cosine,
    Bm25,
}

/// How equal perplexities are positioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRank {
    /// Tied items share the lowest position of their group.
    #[default]
    Min,
    /// Position in the id-tie-broken sort order.
    Ordinal,
}

/// Which cluster decides whether a neighbour counts as clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagScope {
    /// Each neighbour is ranked within its own k-neighbourhood.
    #[default]
    OwnCluster,
    /// Neighbours are judged by their rank in the candidate's cluster.
    CandidateCluster,
}

macro_rules! from_str_enum {
    ($t:ty, $($s:literal => $v:expr),+) => {
        impl std::str::FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(format!("unknown value {s:?}; expected one of: {}", [$($s),+].join(", "))),
                }
            }
        }
    };
}

from_str_enum!(RankBase, "zero_based" => RankBase::ZeroBased, "one_based" => RankBase::OneBased);
from_str_enum!(LprSimilarity, "cosine" => LprSimilarity::Cosine, "bm25" => LprSimilarity::Bm25);
from_str_enum!(TieRank, "min" => TieRank::Min, "ordinal" => TieRank::Ordinal);
from_str_enum!(FlagScope, "own_cluster" => FlagScope::OwnCluster, "candidate_cluster" => FlagScope::CandidateCluster);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LprConfig {
    pub k: usize,
    pub gamma: f64,
    pub rank_base: RankBase,
    pub similarity: LprSimilarity,
    pub reorder: bool,
    pub tie_rank: TieRank,
    pub flag_scope: FlagScope,
}

impl Default for LprConfig {
    fn default() -> Self {
        Self {
            k: 4,
            gamma: 0.5,
            rank_base: RankBase::ZeroBased,
            similarity: LprSimilarity::Cosine,
            reorder: true,
            tie_rank: TieRank::Min,
            flag_scope: FlagScope::OwnCluster,
        }
    }
}

impl LprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(LprError::InvalidConfig("k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(LprError::InvalidConfig(format!("gamma {} is outside [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Perplexities for a set of pool ids.
pub trait ScoreLookup: Sync {
    fn lookup(&self, ids: &[String]) -> Result<BTreeMap<String, f64>>;
}

impl ScoreLookup for BTreeMap<String, f64> {
    fn lookup(&self, ids: &[String]) -> Result<BTreeMap<String, f64>> {
        from_map(ids, |id| self.get(id).copied())
    }
}

impl ScoreLookup for HashMap<String, f64> {
    fn lookup(&self, ids: &[String]) -> Result<BTreeMap<String, f64>> {
        from_map(ids, |id| self.get(id).copied())
    }
}

fn from_map(ids: &[String], get: impl Fn(&str) -> Option<f64>) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let mut missing = Vec::new();
    for id in ids {
        match get(id) {
            Some(p) => {
                out.insert(id.clone(), p);
            }
            None => missing.push(id.clone()),
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        missing.sort();
        missing.dedup();
        Err(LprError::MissingScore(missing))
    }
}

/// Scores on demand through a backend and the shared cache.
pub struct BackendLookup<'a> {
    pub backend: &'a dyn ScorerBackend,
    pub pool: Pool<'a>,
    pub cache: &'a ScoreCache,
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl ScoreLookup for BackendLookup<'_> {
    fn lookup(&self, ids: &[String]) -> Result<BTreeMap<String, f64>> {
        Ok(batch_score(self.backend, self.pool, ids, self.cache, self.parallelism, &self.retry)?)
    }
}

/// A cluster sorted by ascending perplexity (ties by ascending id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankList {
    pub cluster_ids: Vec<String>,
    pub sorted_ids: Vec<String>,
    pub loc: BTreeMap<String, usize>,
}

impl RankList {
    /// Zero-based position of `id`.
    pub fn loc_of(&self, id: &str) -> Option<usize> {
        self.loc.get(id).copied()
    }
}

pub fn local_rank(cluster: &NeighborCluster, scores: &BTreeMap<String, f64>, tie: TieRank) -> Result<RankList> {
    let cluster_ids: Vec<String> = cluster.members().map(str::to_string).collect();
    let mut missing: Vec<String> = cluster_ids.iter().filter(|id| !scores.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(LprError::MissingScore(missing));
    }
    let mut sorted: Vec<(&str, f64)> = cluster_ids.iter().map(|id| (id.as_str(), scores[id])).collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let mut loc = BTreeMap::new();
    let mut group_start = 0;
    for (i, (id, p)) in sorted.iter().enumerate() {
        if i > 0 && *p != sorted[i - 1].1 {
            group_start = i;
        }
        loc.insert(id.to_string(), if tie == TieRank::Min { group_start } else { i });
    }
    let sorted_ids = sorted.into_iter().map(|(id, _)| id.to_string()).collect();
    Ok(RankList { cluster_ids, sorted_ids, loc })
}

/// `Loc / (k + 1)` in the configured base.
pub fn rank_fraction(loc: usize, k: usize, base: RankBase) -> f64 {
    let loc = match base {
        RankBase::ZeroBased => loc,
        RankBase::OneBased => loc + 1,
    };
    loc as f64 / (k + 1) as f64
}

/// The flag rule: `g = 1` iff `Loc / (k + 1) >= gamma`.
pub fn flag_for_fraction(fraction: f64, gamma: f64) -> bool {
    fraction >= gamma
}

/// Flag and rank fraction of `candidate_id` within `rank`.
pub fn flag_candidate(rank: &RankList, candidate_id: &str, cfg: &LprConfig) -> Result<(bool, f64)> {
    let loc = rank.loc_of(candidate_id).ok_or_else(|| LprError::MissingScore(vec![candidate_id.to_string()]))?;
    let k = rank.cluster_ids.len() - 1;
    let f = rank_fraction(loc, k, cfg.rank_base);
    Ok((flag_for_fraction(f, cfg.gamma), f))
}

/// Outcome for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionRecord {
    pub original_id: String,
    #[serde(default)]
    pub replacement_id: Option<String>,
    pub flag: bool,
    pub rank_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Replacement for a flagged candidate: the first neighbour in similarity
/// order that is clean and not already used. `is_clean` is only consulted
/// for neighbours that are free.
pub fn substitute_with(
    candidate_id: &str,
    flag: bool,
    rank_fraction: f64,
    cluster: &NeighborCluster,
    in_use: &HashSet<String>,
    mut is_clean: impl FnMut(&str) -> Result<bool>,
) -> Result<SubstitutionRecord> {
    let mut rec = SubstitutionRecord {
        original_id: candidate_id.to_string(),
        replacement_id: None,
        flag,
        rank_fraction,
        error: None,
    };
    if flag {
        for n in &cluster.neighbor_ids {
            if !in_use.contains(n) && is_clean(n)? {
                rec.replacement_id = Some(n.clone());
                break;
            }
        }
    }
    Ok(rec)
}

/// [`substitute_with`] over precomputed neighbour flags (`true` = flagged).
pub fn substitute(
    candidate_id: &str,
    cluster: &NeighborCluster,
    flags: &HashMap<String, bool>,
    rank_fraction: f64,
    in_use: &HashSet<String>,
) -> Result<SubstitutionRecord> {
    let flag = *flags.get(candidate_id).ok_or_else(|| LprError::MissingScore(vec![candidate_id.to_string()]))?;
    substitute_with(candidate_id, flag, rank_fraction, cluster, in_use, |n| {
        flags.get(n).map(|f| !f).ok_or_else(|| LprError::MissingScore(vec![n.to_string()]))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LprOutcome {
    pub set: DemonstrationSet,
    pub records: Vec<SubstitutionRecord>,
}

/// Evaluates flags of pool items, remembering neighbourhoods and results.
struct Flagger<'a> {
    neighbors: &'a dyn NeighborSearch,
    scores: &'a dyn ScoreLookup,
    cfg: &'a LprConfig,
    clusters: HashMap<String, NeighborCluster>,
    flags: HashMap<String, (bool, f64)>,
}

impl<'a> Flagger<'a> {
    fn cluster(&mut self, id: &str) -> Result<NeighborCluster> {
        if let Some(c) = self.clusters.get(id) {
            return Ok(c.clone());
        }
        let c = self.neighbors.knn(id, self.cfg.k)?;
        self.clusters.insert(id.to_string(), c.clone());
        Ok(c)
    }

    fn rank(&mut self, id: &str) -> Result<RankList> {
        let cluster = self.cluster(id)?;
        let members: Vec<String> = cluster.members().map(str::to_string).collect();
        let scores = self.scores.lookup(&members)?;
        local_rank(&cluster, &scores, self.cfg.tie_rank)
    }

    fn flag(&mut self, id: &str) -> Result<(bool, f64)> {
        if let Some(f) = self.flags.get(id) {
            return Ok(*f);
        }
        let rank = self.rank(id)?;
        let f = flag_candidate(&rank, id, self.cfg)?;
        self.flags.insert(id.to_string(), f);
        Ok(f)
    }
}

/// Runs LPR over one raw demonstration set. Per-candidate failures leave
/// that candidate in place and are recorded; configuration errors abort.
///
/// With `cfg.reorder` the result is sorted by ascending cosine similarity
/// to the test input, which needs `emb`.
pub fn lpr_filter(
    raw: &DemonstrationSet,
    neighbors: &dyn NeighborSearch,
    scores: &dyn ScoreLookup,
    emb: Option<&EmbeddingMatrix>,
    cfg: &LprConfig,
) -> Result<LprOutcome> {
    cfg.validate()?;
    if cfg.reorder && emb.is_none() {
        return Err(LprError::InvalidConfig("reordering needs embeddings".into()));
    }
    let mut flagger = Flagger { neighbors, scores, cfg, clusters: HashMap::new(), flags: HashMap::new() };

    // Score every candidate cluster in one request so misses are fetched in
    // parallel; failures surface per candidate below.
    let mut union: Vec<String> = Vec::new();
    for id in &raw.demo_ids {
        if let Ok(c) = flagger.cluster(id) {
            union.extend(c.members().map(str::to_string));
        }
    }
    union.sort();
    union.dedup();
    let _ = scores.lookup(&union);

    let mut in_use: HashSet<String> = raw.demo_ids.iter().cloned().collect();
    let mut out_ids = Vec::with_capacity(raw.demo_ids.len());
    let mut records = Vec::with_capacity(raw.demo_ids.len());
    for id in &raw.demo_ids {
        let rec = process_candidate(&mut flagger, id, &in_use).unwrap_or_else(|e| SubstitutionRecord {
            original_id: id.clone(),
            replacement_id: None,
            flag: false,
            rank_fraction: 0.0,
            error: Some(e.to_string()),
        });
        match &rec.replacement_id {
            Some(r) => {
                in_use.insert(r.clone());
                out_ids.push(r.clone());
            }
            None => out_ids.push(id.clone()),
        }
        records.push(rec);
    }
    let mut set = DemonstrationSet {
        test_id: raw.test_id.clone(),
        demo_ids: out_ids,
        provenance: Provenance::LprFiltered,
        dpp_jitter: raw.dpp_jitter,
    };
    if let (true, Some(emb)) = (cfg.reorder, emb) {
        set = reorder_by_similarity(&set, emb)?;
    }
    Ok(LprOutcome { set, records })
}

fn process_candidate(flagger: &mut Flagger<'_>, id: &str, in_use: &HashSet<String>) -> Result<SubstitutionRecord> {
    let rank = flagger.rank(id)?;
    let (flag, frac) = flag_candidate(&rank, id, flagger.cfg)?;
    flagger.flags.insert(id.to_string(), (flag, frac));
    let cluster = flagger.cluster(id)?;
    match flagger.cfg.flag_scope {
        FlagScope::OwnCluster => substitute_with(id, flag, frac, &cluster, in_use, |n| Ok(!flagger.flag(n)?.0)),
        FlagScope::CandidateCluster => {
            let cfg = flagger.cfg;
            substitute_with(id, flag, frac, &cluster, in_use, |n| Ok(!flag_candidate(&rank, n, cfg)?.0))
        }
    }
}

/// The K lowest-perplexity candidates, cheapest first, ties by id.
pub fn global_rank_filter(
    test_id: &str,
    candidates: &[String],
    scores: &dyn ScoreLookup,
    k_demos: usize,
) -> Result<DemonstrationSet> {
    let s = scores.lookup(candidates)?;
    let mut ranked: Vec<(&String, f64)> = candidates.iter().map(|id| (id, s[id])).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    ranked.dedup_by(|a, b| a.0 == b.0);
    Ok(DemonstrationSet {
        test_id: test_id.to_string(),
        demo_ids: ranked.into_iter().take(k_demos).map(|(id, _)| id.clone()).collect(),
        provenance: Provenance::GlobalFiltered,
        dpp_jitter: None,
    })
}

/// Most frequent label among the neighbours, if it is unique.
fn majority_label<'l>(cluster: &NeighborCluster, labels: &'l HashMap<String, String>) -> Result<Option<&'l str>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for n in &cluster.neighbor_ids {
        let l = labels.get(n).ok_or_else(|| LprError::MissingLabel(n.clone()))?;
        *counts.entry(l.as_str()).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let mut winners = counts.into_iter().filter(|(_, c)| *c == top);
    Ok(match (winners.next(), winners.next()) {
        (Some((l, _)), None) => Some(l),
        _ => None,
    })
}

/// Classification variant: a candidate is flagged when its label differs
/// from its neighbours' strict majority label, and is replaced by the
/// nearest free neighbour carrying that label.
pub fn label_agreement_filter(
    raw: &DemonstrationSet,
    neighbors: &dyn NeighborSearch,
    labels: &HashMap<String, String>,
    cfg: &LprConfig,
) -> Result<LprOutcome> {
    cfg.validate()?;
    let mut in_use: HashSet<String> = raw.demo_ids.iter().cloned().collect();
    let mut out_ids = Vec::with_capacity(raw.demo_ids.len());
    let mut records = Vec::with_capacity(raw.demo_ids.len());
    for id in &raw.demo_ids {
        let own = labels.get(id).ok_or_else(|| LprError::MissingLabel(id.clone()))?;
        let cluster = neighbors.knn(id, cfg.k)?;
        let majority = majority_label(&cluster, labels)?;
        let flag = majority.is_some_and(|m| m != own);
        let disagree = cluster.neighbor_ids.iter().filter(|n| labels[n.as_str()] != *own).count();
        let frac = disagree as f64 / cluster.k() as f64;
        let rec = substitute_with(id, flag, frac, &cluster, &in_use, |n| Ok(Some(labels[n].as_str()) == majority))?;
        match &rec.replacement_id {
            Some(r) => {
                in_use.insert(r.clone());
                out_ids.push(r.clone());
            }
            None => out_ids.push(id.clone()),
        }
        records.push(rec);
    }
    let set = DemonstrationSet {
        test_id: raw.test_id.clone(),
        demo_ids: out_ids,
        provenance: Provenance::LprFiltered,
        dpp_jitter: raw.dpp_jitter,
    };
    Ok(LprOutcome { set, records })
}

/// Stable sort by ascending cosine similarity to the test input, so the
/// most similar demonstration ends up next to the query.
pub fn reorder_by_similarity(demos: &DemonstrationSet, emb: &EmbeddingMatrix) -> Result<DemonstrationSet> {
    let test = emb.row(&demos.test_id).ok_or_else(|| LprError::MissingEmbedding(demos.test_id.clone()))?;
    let mut keyed = Vec::with_capacity(demos.demo_ids.len());
    for id in &demos.demo_ids {
        let v = emb.row(id).ok_or_else(|| LprError::MissingEmbedding(id.clone()))?;
        keyed.push((cosine_similarity(test, v)?, id.clone()));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(DemonstrationSet { demo_ids: keyed.into_iter().map(|(_, id)| id).collect(), ..demos.clone() })
}
