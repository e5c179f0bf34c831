use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use icl_forge_core::lpr::BackendLookup;
use icl_forge_core::pipeline::{scoring_demand, ScoringDemand, SelectionPlan};
use icl_forge_core::scoring::{CountingScorer, RetryPolicy, ScoreCache, ScorerBackend};
use serde::Serialize;

use crate::cmd::select::Stage;
use crate::config::RunConfig;
use crate::io::{to_pretty, usage};
use crate::resources::{self, check_coverage, pool_and_test};
use crate::{LprArgs, ScorerArgs, SelectorArgs};

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_name = "PATH")]
    pub pool: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub test: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub embeddings: PathBuf,
    #[command(flatten)]
    pub selector: SelectorArgs,
    #[command(flatten)]
    pub lpr: LprArgs,
    /// Scorer options; --cache is ignored because both sides start cold.
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Write the JSON report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Side {
    /// Backend calls with a cold cache, i.e. distinct ids scored.
    backend_calls: usize,
    /// Sum over test inputs of the ids each one needed.
    per_test_requests: usize,
    unique_requests: usize,
    /// Backend calls when rerun against the now-warm cache.
    warm_backend_calls: usize,
}

#[derive(Debug, Serialize)]
struct Timing {
    cold_seconds: f64,
    warm_seconds: f64,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    test_inputs: usize,
    pool_size: usize,
    k_demos: usize,
    lpr_k: usize,
    candidate_pool_size: usize,
    backend_tag: String,
    local: Side,
    global: Side,
    /// (k+1)·K·|test|.
    local_bound: usize,
    /// M·|test|.
    global_requests_before_dedup: usize,
    local_to_global_unique_ratio: f64,
    config: serde_json::Value,
    timing: Timing,
}

struct Pass {
    local: ScoringDemand,
    global: ScoringDemand,
    local_calls: usize,
    global_calls: usize,
    seconds: f64,
}

fn pass(
    backend: &dyn ScorerBackend,
    plan: &SelectionPlan<'_>,
    stage: &Stage,
    cfg: &RunConfig,
    caches: &(ScoreCache, ScoreCache),
) -> anyhow::Result<Pass> {
    let local_backend = CountingScorer::new(backend);
    let global_backend = CountingScorer::new(backend);
    let lookup = |backend, cache| BackendLookup {
        backend,
        pool: stage.pool.pool(),
        cache,
        parallelism: cfg.jobs_for(stage.remote()),
        retry: RetryPolicy::default(),
    };
    let local_lookup = lookup(&local_backend, &caches.0);
    let global_lookup = lookup(&global_backend, &caches.1);
    let start = Instant::now();
    let (local, global) = scoring_demand(plan, &cfg.lpr, stage.test.examples(), &local_lookup, &global_lookup)
        .context("ranking")?;
    Ok(Pass {
        local,
        global,
        local_calls: local_backend.calls(),
        global_calls: global_backend.calls(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run(a: BenchArgs, mut cfg: RunConfig, jobs: Option<usize>) -> anyhow::Result<()> {
    cfg.apply_jobs(jobs);
    cfg.apply_selector(&a.selector);
    cfg.apply_lpr(&a.lpr);
    cfg.lpr_enabled = true;
    cfg.global_rank = false;
    if let Some(p) = a.scorer.ppl_on {
        cfg.ppl_on = p;
    }
    cfg.validate()?;
    if a.scorer.scorer.is_none() {
        return Err(usage("bench needs --scorer"));
    }
    let (pool, test) = pool_and_test(&a.pool, &a.test)?;
    let emb = resources::embeddings(&a.embeddings)?;
    check_coverage(&emb, &[&pool, &test])?;
    let scorer = ScorerArgs { cache: None, ..a.scorer.clone() };
    let stage = Stage::from_parts(pool, test, emb, &scorer, &cfg)?;
    let backend = stage.backend.as_deref().expect("scorer checked above");
    let plan = stage.plan(&cfg, None);

    let caches = (ScoreCache::in_memory(), ScoreCache::in_memory());
    let cold = pass(backend, &plan, &stage, &cfg, &caches)?;
    let warm = pass(backend, &plan, &stage, &cfg, &caches)?;

    let n_test = stage.test.len();
    let report = BenchReport {
        test_inputs: n_test,
        pool_size: stage.pool.len(),
        k_demos: cfg.selector.k_demos,
        lpr_k: cfg.lpr.k,
        candidate_pool_size: cfg.selector.candidate_pool_size,
        backend_tag: backend.tag().to_string(),
        local: Side {
            backend_calls: cold.local_calls,
            per_test_requests: cold.local.per_test_requests,
            unique_requests: cold.local.unique_requests,
            warm_backend_calls: warm.local_calls,
        },
        global: Side {
            backend_calls: cold.global_calls,
            per_test_requests: cold.global.per_test_requests,
            unique_requests: cold.global.unique_requests,
            warm_backend_calls: warm.global_calls,
        },
        local_bound: (cfg.lpr.k + 1) * cfg.selector.k_demos * n_test,
        global_requests_before_dedup: cfg.selector.candidate_pool_size * n_test,
        local_to_global_unique_ratio: cold.local.unique_requests as f64 / cold.global.unique_requests.max(1) as f64,
        config: cfg.to_json(),
        timing: Timing { cold_seconds: cold.seconds, warm_seconds: warm.seconds },
    };
    let text = to_pretty(&report);
    match &a.out {
        Some(path) => {
            std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "local: {} backend calls, global: {} backend calls (ratio {:.3}); warm rerun: {} + {}",
                report.local.backend_calls,
                report.global.backend_calls,
                report.local_to_global_unique_ratio,
                report.local.warm_backend_calls,
                report.global.warm_backend_calls
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}
