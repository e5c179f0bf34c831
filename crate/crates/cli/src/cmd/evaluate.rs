use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use icl_forge_core::corpus::NoiseSpec;
use icl_forge_core::eval::{run_eval, DemoSource, EvalConfig, EvalReport, Metric, NoiseSummary};
use icl_forge_core::lpr::ScoreLookup;
use icl_forge_core::selectors::DemonstrationSet;
use serde::Deserialize;

use crate::cmd::noise;
use crate::cmd::select::Stage;
use crate::config::RunConfig;
use crate::io::{require_file, sidecar, usage, write_json, write_jsonl};
use crate::resources::{self, check_coverage, generator, is_remote, pool_and_test};
use crate::{LprArgs, ScorerArgs, SelectorArgs};

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "PATH")]
    pub pool: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub test: PathBuf,
    /// Precomputed demonstration sets from `select`; otherwise selection runs here.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["embeddings", "lpr", "global_rank"])]
    pub sets: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,
    #[command(flatten)]
    pub selector: SelectorArgs,
    #[command(flatten)]
    pub lpr: LprArgs,
    #[command(flatten)]
    pub scorer: ScorerArgs,
    /// `echo:reference`, `echo:empty`, `echo:const:<text>`, `echo:fail` or an http(s) base URL.
    #[arg(long, value_name = "URI")]
    pub generator: String,
    /// Prompt length limit in estimated tokens, checked before each HTTP call.
    #[arg(long)]
    pub context_window: Option<usize>,
    #[arg(long, value_name = "em|bleu")]
    pub metric: Option<Metric>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Name recorded in the report (default: pool file stem).
    #[arg(long)]
    pub dataset_name: Option<String>,
    /// Report JSON; per-example rows go to `<out>.examples.jsonl`.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Deserialize)]
struct NoiseProvenance {
    noise_spec: NoiseSpec,
}

/// The injection spec recorded next to the pool, when there is one.
fn recorded_noise(pool_path: &Path) -> anyhow::Result<Option<NoiseSpec>> {
    let path = noise::sidecar_path(pool_path);
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let p: NoiseProvenance = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(p.noise_spec))
}

fn read_sets(path: &Path) -> anyhow::Result<HashMap<String, DemonstrationSet>> {
    require_file(path, "demonstration set")?;
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut sets = HashMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let set: DemonstrationSet =
            serde_json::from_str(&line).map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if sets.insert(set.test_id.clone(), set).is_some() {
            return Err(usage(format!("{}:{}: duplicate test id", path.display(), i + 1)));
        }
    }
    Ok(sets)
}

pub fn print_table(reports: &[EvalReport]) {
    println!("| dataset | selector | filter | noise | metric | mean ± std | runs |");
    println!("|---|---|---|---|---|---|---|");
    for r in reports {
        let filter = if r.lpr_enabled {
            "lpr"
        } else if r.global_rank {
            "global"
        } else {
            "none"
        };
        let noise = r.noise_spec.as_ref().map_or_else(|| "-".to_string(), |n| format!("{:.0}%", 100.0 * n.rate));
        println!(
            "| {} | {} | {} | {} | {} | {:.2} ± {:.2} | {} |",
            r.dataset,
            r.selector,
            filter,
            noise,
            match r.metric {
                Metric::Em => "em",
                Metric::Bleu => "bleu",
            },
            r.mean,
            r.std,
            r.n_runs
        );
    }
}

pub fn run(a: EvaluateArgs, mut cfg: RunConfig, jobs: Option<usize>) -> anyhow::Result<()> {
    cfg.apply_jobs(jobs);
    cfg.apply_selector(&a.selector);
    cfg.apply_lpr(&a.lpr);
    if let Some(m) = a.metric {
        cfg.metric = m;
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(p) = a.scorer.ppl_on {
        cfg.ppl_on = p;
    }
    cfg.validate()?;
    if a.sets.is_some() && (cfg.lpr_enabled || cfg.global_rank) {
        return Err(usage("--sets cannot be combined with LPR or global ranking; filter during select instead"));
    }

    let (mut pool, test) = pool_and_test(&a.pool, &a.test)?;
    pool.noise_spec = recorded_noise(&a.pool)?;
    let noise = NoiseSummary::of(&pool);
    let dataset_name = a.dataset_name.clone().unwrap_or_else(|| {
        a.pool.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
    });
    let model = a.scorer.model.as_deref();
    let gen = generator(&a.generator, &test, model, a.context_window)?;

    let fixed;
    let stage;
    let lookup;
    let plan;
    let (demos, selector_name, template, remote) = match &a.sets {
        Some(path) => {
            fixed = read_sets(path)?;
            let template = resources::template(a.scorer.template.as_deref(), &pool)?;
            (DemoSource::Fixed(&fixed), "fixed".to_string(), template, false)
        }
        None => {
            let emb_path = a.embeddings.as_deref().ok_or_else(|| usage("give --sets or --embeddings"))?;
            let emb = resources::embeddings(emb_path)?;
            check_coverage(&emb, &[&pool, &test])?;
            stage = Stage::from_parts(pool.clone(), test.clone(), emb, &a.scorer, &cfg)?;
            lookup = stage.lookup(&cfg);
            plan = stage.plan(&cfg, lookup.as_ref().map(|l| l as &dyn ScoreLookup));
            let template = stage.template.clone();
            (DemoSource::Plan(&plan), cfg.selector.method.as_str().to_string(), template, stage.remote())
        }
    };
    let eval_cfg = EvalConfig {
        dataset: dataset_name,
        selector: selector_name,
        lpr_enabled: cfg.lpr_enabled,
        global_rank: cfg.global_rank,
        noise,
        pool: pool.pool(),
        test: &test,
        demos,
        template: &template,
        generator: gen.as_ref(),
        metric: cfg.metric,
        seeds: cfg.seeds.clone(),
        jobs: cfg.jobs_for(remote || is_remote(&a.generator)),
    };
    let outcome = run_eval(&eval_cfg).context("evaluation failed")?;

    write_json(&a.out, &outcome.report)?;
    write_jsonl(&sidecar(&a.out, ".examples.jsonl"), &outcome.rows)?;
    write_json(
        &sidecar(&a.out, ".meta.json"),
        &serde_json::json!({
            "command": "evaluate",
            "pool": a.pool,
            "test": a.test,
            "sets": a.sets,
            "embeddings": a.embeddings,
            "scorer": a.scorer.scorer,
            "generator": a.generator,
            "template": template,
            "config": cfg.to_json(),
        }),
    )?;
    print_table(std::slice::from_ref(&outcome.report));
    Ok(())
}
