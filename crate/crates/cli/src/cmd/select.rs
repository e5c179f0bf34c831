use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use icl_forge_core::corpus::Dataset;
use icl_forge_core::embedspace::{CosineIndex, EmbeddingMatrix};
use icl_forge_core::eval::PromptTemplate;
use icl_forge_core::lpr::{BackendLookup, ScoreLookup, SubstitutionRecord};
use icl_forge_core::pipeline::{Filter, SelectionPlan};
use icl_forge_core::scoring::{RetryPolicy, ScoreCache, ScorerBackend};
use icl_forge_core::selectors::build_pool_index;
use serde::Serialize;

use crate::config::RunConfig;
use crate::io::{par_map, sidecar, usage, write_json, write_jsonl};
use crate::resources::{self, check_coverage, is_remote, pool_and_test, Neighbours};
use crate::{LprArgs, ScorerArgs, SelectorArgs};

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long, value_name = "PATH")]
    pub pool: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub test: PathBuf,
    /// Vectors for pool and test ids (JSONL or packed `.f32`).
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub selector: SelectorArgs,
    #[command(flatten)]
    pub lpr: LprArgs,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Demonstration sets, one JSON object per test example.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Substitution audit (default: `<out>.audit.jsonl` when LPR is on).
    #[arg(long, value_name = "PATH")]
    pub audit: Option<PathBuf>,
}

/// Everything a selection run borrows from.
pub struct Stage {
    pub pool: Dataset,
    pub test: Dataset,
    pub emb: EmbeddingMatrix,
    pub index: CosineIndex,
    pub neighbours: Neighbours,
    pub template: PromptTemplate,
    pub backend: Option<Box<dyn ScorerBackend>>,
    pub scorer_uri: Option<String>,
    pub cache: ScoreCache,
}

impl Stage {
    pub fn load(pool: &Path, test: &Path, embeddings: &Path, scorer: &ScorerArgs, cfg: &RunConfig) -> anyhow::Result<Self> {
        let (pool, test) = pool_and_test(pool, test)?;
        let emb = resources::embeddings(embeddings)?;
        check_coverage(&emb, &[&pool, &test])?;
        Self::from_parts(pool, test, emb, scorer, cfg)
    }

    pub fn from_parts(
        pool: Dataset,
        test: Dataset,
        emb: EmbeddingMatrix,
        scorer: &ScorerArgs,
        cfg: &RunConfig,
    ) -> anyhow::Result<Self> {
        let index = build_pool_index(pool.pool(), &emb).context("indexing pool embeddings")?;
        let neighbours = Neighbours::build(cfg.lpr.similarity, &pool, cfg.embed_on)?;
        let template = resources::template(scorer.template.as_deref(), &pool)?;
        let needs_scores = cfg.lpr_enabled || cfg.global_rank;
        let backend = match (&scorer.scorer, needs_scores) {
            (Some(uri), _) => Some(resources::scorer(uri, &pool, scorer.model.as_deref(), &template, cfg.ppl_on)?),
            (None, true) => return Err(usage("--lpr and --global-rank need --scorer")),
            (None, false) => None,
        };
        let cache = if needs_scores { resources::cache(scorer.cache.as_deref())? } else { ScoreCache::in_memory() };
        Ok(Self { pool, test, emb, index, neighbours, template, backend, scorer_uri: scorer.scorer.clone(), cache })
    }

    pub fn remote(&self) -> bool {
        self.scorer_uri.as_deref().is_some_and(is_remote)
    }

    pub fn lookup(&self, cfg: &RunConfig) -> Option<BackendLookup<'_>> {
        self.backend.as_deref().map(|backend| BackendLookup {
            backend,
            pool: self.pool.pool(),
            cache: &self.cache,
            parallelism: cfg.jobs_for(self.remote()),
            retry: RetryPolicy::default(),
        })
    }

    pub fn plan<'a>(&'a self, cfg: &RunConfig, scores: Option<&'a dyn ScoreLookup>) -> SelectionPlan<'a> {
        let filter = if cfg.lpr_enabled {
            Filter::Lpr(cfg.lpr.clone())
        } else if cfg.global_rank {
            Filter::GlobalRank { reorder: cfg.lpr.reorder }
        } else {
            Filter::None
        };
        SelectionPlan {
            pool: self.pool.pool(),
            index: &self.index,
            emb: &self.emb,
            neighbors: self.neighbours.search(&self.index),
            scores,
            selector: cfg.selector.clone(),
            filter,
        }
    }
}

#[derive(Serialize)]
struct AuditRow<'a> {
    test_id: &'a str,
    #[serde(flatten)]
    record: &'a SubstitutionRecord,
}

pub fn run(a: SelectArgs, mut cfg: RunConfig, jobs: Option<usize>) -> anyhow::Result<()> {
    cfg.apply_jobs(jobs);
    cfg.apply_selector(&a.selector);
    cfg.apply_lpr(&a.lpr);
    if let Some(p) = a.scorer.ppl_on {
        cfg.ppl_on = p;
    }
    cfg.validate()?;
    let stage = Stage::load(&a.pool, &a.test, &a.embeddings, &a.scorer, &cfg)?;
    let lookup = stage.lookup(&cfg);
    let plan = stage.plan(&cfg, lookup.as_ref().map(|l| l as &dyn ScoreLookup));
    let selections = par_map(stage.test.examples(), cfg.jobs_for(stage.remote()), |t| {
        plan.select(t).with_context(|| format!("selecting for {}", t.id))
    })
    .into_iter()
    .collect::<anyhow::Result<Vec<_>>>()?;

    write_jsonl(&a.out, selections.iter().map(|s| &s.set))?;
    let audit = match (&a.audit, cfg.lpr_enabled) {
        (Some(p), _) => Some(p.clone()),
        (None, true) => Some(sidecar(&a.out, ".audit.jsonl")),
        (None, false) => None,
    };
    if let Some(path) = &audit {
        let rows = selections
            .iter()
            .flat_map(|s| s.records.iter().map(|record| AuditRow { test_id: &s.set.test_id, record }));
        write_jsonl(path, rows)?;
    }
    write_json(
        &sidecar(&a.out, ".meta.json"),
        &serde_json::json!({
            "command": "select",
            "pool": a.pool,
            "test": a.test,
            "embeddings": a.embeddings,
            "scorer": stage.scorer_uri,
            "backend_tag": stage.backend.as_ref().map(|b| b.tag()),
            "audit": audit,
            "config": cfg.to_json(),
        }),
    )?;
    let substituted: usize =
        selections.iter().flat_map(|s| &s.records).filter(|r| r.replacement_id.is_some()).count();
    println!("{}: {} demonstration sets, {} substitutions", a.out.display(), selections.len(), substituted);
    Ok(())
}
