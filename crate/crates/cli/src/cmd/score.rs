use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use icl_forge_core::corpus::Split;
use icl_forge_core::scoring::{batch_score, PerplexityScore, RetryPolicy};

use crate::config::RunConfig;
use crate::io::{sidecar, usage, write_json, write_jsonl};
use crate::resources::{cache, dataset, is_remote, scorer, template};
use crate::ScorerArgs;

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long, value_name = "PATH")]
    pub pool: PathBuf,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// Score file to write: `{id, perplexity, backend_tag}` per line.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

pub fn run(a: ScoreArgs, mut cfg: RunConfig, jobs: Option<usize>) -> anyhow::Result<()> {
    cfg.apply_jobs(jobs);
    if let Some(p) = a.scorer.ppl_on {
        cfg.ppl_on = p;
    }
    cfg.validate()?;
    let uri = a.scorer.scorer.as_deref().ok_or_else(|| usage("score needs --scorer"))?;
    let pool = dataset(&a.pool, Split::Pool, "pool")?;
    let tpl = template(a.scorer.template.as_deref(), &pool)?;
    let backend = scorer(uri, &pool, a.scorer.model.as_deref(), &tpl, cfg.ppl_on)?;
    let cache = cache(a.scorer.cache.as_deref())?;
    let ids: Vec<String> = pool.examples().iter().map(|e| e.id.clone()).collect();
    let scores = batch_score(
        backend.as_ref(),
        pool.pool(),
        &ids,
        &cache,
        cfg.jobs_for(is_remote(uri)),
        &RetryPolicy::default(),
    )
    .context("scoring pool")?;
    let rows = ids.iter().map(|id| PerplexityScore {
        example_id: id.clone(),
        perplexity: scores[id],
        backend_tag: backend.tag().to_string(),
    });
    write_jsonl(&a.out, rows)?;
    write_json(
        &sidecar(&a.out, ".meta.json"),
        &serde_json::json!({
            "command": "score",
            "pool": a.pool,
            "scorer": uri,
            "backend_tag": backend.tag(),
            "config": cfg.to_json(),
        }),
    )?;
    println!("{}: {} scores ({})", a.out.display(), ids.len(), backend.tag());
    Ok(())
}
